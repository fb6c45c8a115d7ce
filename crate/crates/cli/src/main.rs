use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use failsim_cli::{cmd_run, cmd_stats, cmd_verify, RunConfig, Verdict, Workload, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "failsim",
    version,
    about = "Scheduler-level failure injection simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write its NDJSON trace.
    Run {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ticks per scheduling slot.
        #[arg(long, default_value_t = 1)]
        quantum: u64,
        /// Stop once the clock reaches this tick.
        #[arg(long)]
        until: u64,
        /// Scenario file (kill-after, kill-prob, drop, dup; one per line).
        #[arg(long)]
        scenarios: PathBuf,
        /// Workload, currently `harness:<n>`: n daemons in the /xp group.
        #[arg(long)]
        workload: WorkloadSpec,
        #[arg(long, default_value_t = 10)]
        heartbeat: u64,
        #[arg(long, default_value_t = 35)]
        suspicion: u64,
        /// Network latency in ticks.
        #[arg(long, default_value_t = 1)]
        latency: u64,
        /// Output trace path.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Exit 0 iff two traces are byte-identical.
    Verify { a: PathBuf, b: PathBuf },
    /// Summarize a trace.
    ///
    /// Drop and duplicate rates are divided by the SEND count (before
    /// duplication). The kill rate is probe kills over context-switch
    /// attempts.
    Stats {
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
        trace: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            seed,
            quantum,
            until,
            scenarios,
            workload,
            heartbeat,
            suspicion,
            latency,
            trace,
        } => {
            let config = RunConfig {
                seed,
                quantum,
                until,
                scenario_path: scenarios,
                workload: Workload::Harness {
                    daemons: workload.daemons,
                    heartbeat_period: heartbeat,
                    suspicion_timeout: suspicion,
                    latency,
                },
                trace_path: trace,
            };
            println!("{}", cmd_run(&config)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { a, b } => {
            let verdict = cmd_verify(&a, &b)?;
            println!("{verdict}");
            Ok(match verdict {
                Verdict::Identical => ExitCode::SUCCESS,
                Verdict::Differs { .. } => ExitCode::FAILURE,
            })
        }
        Command::Stats { json, trace } => {
            let stats = cmd_stats(&trace)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats.to_json())?);
            } else {
                println!("{stats}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
