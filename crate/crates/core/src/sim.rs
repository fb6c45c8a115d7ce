use std::any::Any;
use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::injector::RandomStream;
use crate::netsim::Network;
use crate::proc_model::Registry;
use crate::scheduler::{Behavior, Scheduler};
use crate::trace::{self, Event, EventKind, KillCause};
use crate::{Pid, SimError, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    /// Ticks per scheduling slot, at least 1.
    pub quantum: Tick,
    /// Constant network latency in ticks, at least 1.
    pub latency: Tick,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            quantum: 1,
            latency: 1,
        }
    }
}

/// How a scheduled kill takes a task down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillMode {
    /// `free_task` only; sockets stay open.
    FailStop,
    /// `close_clean` followed by `free_task`, like an ordinary OS kill.
    CleanClose,
}

pub struct Simulation {
    pub(crate) config: SimConfig,
    pub(crate) registry: Registry,
    pub(crate) scheduler: Scheduler,
    pub(crate) network: Network,
    pub(crate) rng: RandomStream,
    pub(crate) trace: Vec<Event>,
    pub(crate) behaviors: BTreeMap<Pid, Box<dyn Behavior>>,
    /// Sorted by (tick, insertion order).
    pub(crate) pending_kills: Vec<(Tick, Pid, KillMode)>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        if config.quantum == 0 {
            return Err(SimError::InvalidConfig("quantum must be at least 1".into()));
        }
        if config.latency == 0 {
            return Err(SimError::InvalidConfig("latency must be at least 1".into()));
        }
        Ok(Simulation {
            config,
            registry: Registry::new(),
            scheduler: Scheduler::new(config.quantum),
            network: Network::new(config.latency),
            rng: RandomStream::new(config.seed),
            trace: Vec::new(),
            behaviors: BTreeMap::new(),
            pending_kills: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn clock(&self) -> Tick {
        self.scheduler.clock
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn rng(&self) -> &RandomStream {
        &self.rng
    }

    pub fn trace(&self) -> &[Event] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<Event> {
        self.trace
    }

    pub fn write_trace<W: Write>(&self, out: W) -> io::Result<()> {
        trace::write_ndjson(&self.trace, out)
    }

    pub(crate) fn emit(&mut self, kind: EventKind) {
        self.trace.push(Event::new(self.scheduler.clock, kind));
    }

    /// Gives `pid` a behavior that runs every time it is scheduled.
    pub fn attach<B: Behavior + 'static>(&mut self, pid: Pid, behavior: B) -> Result<(), SimError> {
        if self.registry.task(pid).is_none() {
            return Err(SimError::NoSuchTask(pid));
        }
        self.behaviors.insert(pid, Box::new(behavior));
        Ok(())
    }

    pub fn behavior<B: Behavior + 'static>(&self, pid: Pid) -> Option<&B> {
        self.behaviors
            .get(&pid)
            .and_then(|b| (b.as_ref() as &dyn Any).downcast_ref::<B>())
    }

    /// Arranges for `pid` to be killed at the first loop iteration whose
    /// clock is at least `at`, before due messages are delivered.
    pub fn schedule_kill(&mut self, at: Tick, pid: Pid, mode: KillMode) -> Result<(), SimError> {
        if self.registry.task(pid).is_none() {
            return Err(SimError::NoSuchTask(pid));
        }
        let index = self.pending_kills.partition_point(|(t, _, _)| *t <= at);
        self.pending_kills.insert(index, (at, pid, mode));
        Ok(())
    }

    pub(crate) fn apply_due_kills(&mut self) {
        let due = self
            .pending_kills
            .partition_point(|(t, _, _)| *t <= self.scheduler.clock);
        let kills: Vec<_> = self.pending_kills.drain(..due).collect();
        for (_, pid, mode) in kills {
            if mode == KillMode::CleanClose && self.registry.is_runnable(pid) {
                self.close_clean(pid).expect("task was checked to be alive");
            }
            self.free_task_with_cause(pid, KillCause::Direct)
                .expect("pid was validated when the kill was scheduled");
        }
    }
}
