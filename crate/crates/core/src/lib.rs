//! Deterministic simulator for scheduler-level failure injection.
//!
//! Processes live in a registry shaped like the kernel's task list: a
//! parent/child tree rooted at `initd` plus a control-group path per task.
//! A round-robin scheduler fires registered probes at every context switch;
//! a probe that answers [`ProbeDecision::Skip`] frees the task on the spot,
//! before it runs, and leaves every one of its connections open. Peers of
//! such a task only ever find out through silence.
//!
//! The crate is organised around a single [`Simulation`] value that owns the
//! registry, run queue, network, random stream and trace. Each module adds
//! its own operations to it.

pub mod error;
pub mod harness;
pub mod injector;
pub mod netsim;
pub mod proc_model;
pub mod scheduler;
pub mod sim;
pub mod trace;

mod ids;

pub use error::SimError;
pub use harness::{
    measure_latencies, start_runtime, Daemon, DaemonConfig, DetectionRecord, LatencyReport,
};
pub use ids::{ConnId, MsgId, Pid};
pub use injector::{
    install_scenarios, load_scenarios, make_network_probe, make_scheduler_probe, Probability,
    RandomStream, Scenario, ScenarioError, ScenarioKind,
};
pub use netsim::{ConnState, Connection, Message, NetDecision, SendContext};
pub use proc_model::{Registry, Task, TaskState, ROOT_PID, UNKNOWN_GROUP};
pub use scheduler::{Behavior, ProbeContext, ProbeDecision, StepContext, SwitchOutcome};
pub use sim::{KillMode, SimConfig, Simulation};
pub use trace::{Event, EventKind, KillCause, TraceError};

/// Virtual time, in scheduler ticks.
pub type Tick = u64;
