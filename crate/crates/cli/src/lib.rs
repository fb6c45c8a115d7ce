//! `failsim` command implementations: `run`, `verify`, `stats`.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use failsim::trace::parse_ndjson;
use failsim::{
    install_scenarios, load_scenarios, measure_latencies, start_runtime, DaemonConfig, Event,
    EventKind, KillCause, LatencyReport, SimConfig, Simulation, Tick,
};
use serde_json::json;

/// Group the harness daemons are launched into.
pub const RUNTIME_GROUP: &str = "/xp";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    Harness {
        daemons: usize,
        heartbeat_period: Tick,
        suspicion_timeout: Tick,
        latency: Tick,
    },
}

impl Workload {
    pub fn harness(daemons: usize) -> Self {
        let defaults = DaemonConfig::default();
        Workload::Harness {
            daemons,
            heartbeat_period: defaults.heartbeat_period,
            suspicion_timeout: defaults.suspicion_timeout,
            latency: SimConfig::default().latency,
        }
    }
}

/// The `harness:<n>` part of `--workload`; timing comes from other flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub daemons: usize,
}

impl FromStr for WorkloadSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let count = s
            .strip_prefix("harness:")
            .ok_or_else(|| format!("unknown workload {s:?}, expected harness:<n>"))?;
        let daemons = count
            .parse()
            .map_err(|_| format!("{count:?} is not a daemon count"))?;
        Ok(WorkloadSpec { daemons })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub seed: u64,
    pub quantum: Tick,
    pub until: Tick,
    pub scenario_path: PathBuf,
    pub workload: Workload,
    pub trace_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub kills: usize,
    pub drops: usize,
    pub duplicates: usize,
    pub detection: LatencyReport,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kills:      {}", self.kills)?;
        writeln!(f, "drops:      {}", self.drops)?;
        writeln!(f, "duplicates: {}", self.duplicates)?;
        write_latencies(f, &self.detection)
    }
}

fn write_latencies(f: &mut fmt::Formatter<'_>, report: &LatencyReport) -> fmt::Result {
    match (report.min(), report.mean(), report.max()) {
        (Some(min), Some(mean), Some(max)) => writeln!(
            f,
            "detection latency: min {min} / mean {mean:.2} / max {max} ({} detections)",
            report.records.len()
        )?,
        _ => writeln!(f, "detection latency: n/a (0 detections)")?,
    }
    write!(f, "undetected: {}", report.undetected.len())
}

pub fn simulate(config: &RunConfig) -> Result<Simulation> {
    if config.until == 0 {
        bail!("--until must be positive");
    }
    let text = fs::read_to_string(&config.scenario_path)
        .with_context(|| format!("reading {}", config.scenario_path.display()))?;
    let scenarios = load_scenarios(&text)
        .with_context(|| format!("parsing {}", config.scenario_path.display()))?;

    let Workload::Harness {
        daemons,
        heartbeat_period,
        suspicion_timeout,
        latency,
    } = config.workload;
    let mut sim = Simulation::new(SimConfig {
        seed: config.seed,
        quantum: config.quantum,
        latency,
    })?;
    install_scenarios(&mut sim, &scenarios)?;
    start_runtime(
        &mut sim,
        daemons,
        RUNTIME_GROUP,
        DaemonConfig {
            heartbeat_period,
            suspicion_timeout,
        },
    )?;
    sim.run(config.until);
    Ok(sim)
}

/// Runs the simulation and writes its trace to `config.trace_path`.
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary> {
    let sim = simulate(config)?;
    let out = File::create(&config.trace_path)
        .with_context(|| format!("creating {}", config.trace_path.display()))?;
    sim.write_trace(BufWriter::new(out))
        .with_context(|| format!("writing {}", config.trace_path.display()))?;

    let count = |name: &str| sim.trace().iter().filter(|e| e.kind.name() == name).count();
    Ok(RunSummary {
        kills: count("KILL"),
        drops: count("DROP"),
        duplicates: count("DUPLICATE"),
        detection: measure_latencies(sim.trace()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Identical,
    /// 1-based line number; `None` when one file ended first.
    Differs {
        line: usize,
        left: Option<String>,
        right: Option<String>,
    },
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Identical => write!(f, "identical"),
            Verdict::Differs { line, left, right } => {
                let show = |side: &Option<String>| side.clone().unwrap_or_else(|| "<eof>".into());
                write!(
                    f,
                    "traces differ at line {line}\n< {}\n> {}",
                    show(left),
                    show(right)
                )
            }
        }
    }
}

/// Byte comparison of two traces.
pub fn cmd_verify(a: &Path, b: &Path) -> Result<Verdict> {
    let left = fs::read(a).with_context(|| format!("reading {}", a.display()))?;
    let right = fs::read(b).with_context(|| format!("reading {}", b.display()))?;
    if left == right {
        return Ok(Verdict::Identical);
    }
    let left = String::from_utf8_lossy(&left);
    let right = String::from_utf8_lossy(&right);
    let mut lhs = left.split_inclusive('\n');
    let mut rhs = right.split_inclusive('\n');
    let mut line = 1;
    loop {
        match (lhs.next(), rhs.next()) {
            (Some(l), Some(r)) if l == r => line += 1,
            (l, r) => {
                let trim = |s: &str| s.trim_end_matches('\n').to_owned();
                return Ok(Verdict::Differs {
                    line,
                    left: l.map(trim),
                    right: r.map(trim),
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    /// One entry per event kind, in schema order.
    pub counts: Vec<(&'static str, usize)>,
    pub switch_attempts: usize,
    pub probe_kills: usize,
    /// Probe kills over context-switch attempts (SCHEDULE + probe KILL).
    pub kill_rate: Option<f64>,
    /// DROP over SEND.
    pub drop_rate: Option<f64>,
    /// DUPLICATE over SEND.
    pub duplicate_rate: Option<f64>,
    pub detection: LatencyReport,
}

impl Stats {
    pub fn from_events(events: &[Event]) -> Stats {
        let count = |name: &str| events.iter().filter(|e| e.kind.name() == name).count();
        let counts = EventKind::NAMES.iter().map(|&n| (n, count(n))).collect();
        let probe_kills = events
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    EventKind::Kill {
                        cause: KillCause::Probe,
                        ..
                    }
                )
            })
            .count();
        let switch_attempts = count("SCHEDULE") + probe_kills;
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let sends = count("SEND");
        Stats {
            counts,
            switch_attempts,
            probe_kills,
            kill_rate: ratio(probe_kills, switch_attempts),
            drop_rate: ratio(count("DROP"), sends),
            duplicate_rate: ratio(count("DUPLICATE"), sends),
            detection: measure_latencies(events),
        }
    }

    pub fn count(&self, kind: &str) -> usize {
        self.counts
            .iter()
            .find(|(name, _)| *name == kind)
            .map_or(0, |(_, n)| *n)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let counts: serde_json::Map<String, serde_json::Value> = self
            .counts
            .iter()
            .map(|(name, n)| ((*name).to_owned(), json!(n)))
            .collect();
        json!({
            "counts": counts,
            "switch_attempts": self.switch_attempts,
            "probe_kills": self.probe_kills,
            "kill_rate": self.kill_rate,
            "drop_rate": self.drop_rate,
            "duplicate_rate": self.duplicate_rate,
            "detection": {
                "count": self.detection.records.len(),
                "undetected": self.detection.undetected.len(),
                "min": self.detection.min(),
                "mean": self.detection.mean(),
                "max": self.detection.max(),
            },
        })
    }
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.counts {
            writeln!(f, "{name:<10} {n}")?;
        }
        let rate = |r: Option<f64>| r.map_or_else(|| "n/a".to_owned(), |r| format!("{r:.4}"));
        writeln!(
            f,
            "kill rate:      {} ({} of {} switch attempts)",
            rate(self.kill_rate),
            self.probe_kills,
            self.switch_attempts
        )?;
        writeln!(f, "drop rate:      {}", rate(self.drop_rate))?;
        writeln!(f, "duplicate rate: {}", rate(self.duplicate_rate))?;
        write_latencies(f, &self.detection)
    }
}

pub fn cmd_stats(path: &Path) -> Result<Stats> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let events = parse_ndjson(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Stats::from_events(&events))
}
