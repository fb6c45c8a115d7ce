//! Round-robin scheduler with probes on the context-switch entry point.
//!
//! Probes see the task about to run (the `next` argument of the kernel's
//! `context_switch`) before it gets the CPU. The first probe to answer
//! [`ProbeDecision::Skip`] ends the switch: the task is freed, no time is
//! charged and the clock does not move.

use std::any::Any;
use std::collections::VecDeque;

use crate::injector::RandomStream;
use crate::netsim::Message;
use crate::proc_model::Registry;
use crate::trace::{EventKind, KillCause};
use crate::{ConnId, Pid, SimError, Simulation, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDecision {
    Run,
    Skip,
}

/// What a scheduler probe can inspect.
pub struct ProbeContext<'a> {
    pub next: Pid,
    pub registry: &'a Registry,
    pub clock: Tick,
}

pub type SchedulerProbe = Box<dyn FnMut(&ProbeContext<'_>, &mut RandomStream) -> ProbeDecision>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchOutcome {
    Ran(Pid),
    Killed(Pid),
    Idle,
}

pub(crate) struct Scheduler {
    pub(crate) run_queue: VecDeque<Pid>,
    pub(crate) clock: Tick,
    pub(crate) quantum: Tick,
    pub(crate) probes: Vec<SchedulerProbe>,
    pub(crate) started: bool,
}

impl Scheduler {
    pub(crate) fn new(quantum: Tick) -> Self {
        Scheduler {
            run_queue: VecDeque::new(),
            clock: 0,
            quantum,
            probes: Vec::new(),
            started: false,
        }
    }
}

/// Code attached to a task, run once per quantum while the task holds the
/// CPU.
pub trait Behavior: Any {
    fn step(&mut self, ctx: &mut StepContext<'_>);
}

/// The running task's view of the simulation during its quantum.
pub struct StepContext<'a> {
    sim: &'a mut Simulation,
    pid: Pid,
    network_ops: u32,
}

impl StepContext<'_> {
    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn clock(&self) -> Tick {
        self.sim.clock()
    }

    pub fn registry(&self) -> &Registry {
        self.sim.registry()
    }

    /// Sends on `conn` as the running task.
    pub fn send(&mut self, conn: ConnId, payload: &[u8]) -> Result<(), SimError> {
        self.network_ops += 1;
        self.sim.send(conn, self.pid, payload)
    }

    /// Drains the running task's inbox.
    pub fn recv(&mut self) -> Vec<Message> {
        let messages = self.sim.take_inbox(self.pid);
        if !messages.is_empty() {
            self.network_ops += 1;
        }
        messages
    }

    /// Records that the running task now suspects `subject` has failed.
    pub fn suspect(&mut self, subject: Pid) {
        self.sim.emit(EventKind::Suspect {
            observer: self.pid,
            subject,
        });
    }
}

impl Simulation {
    /// Appends a probe; probes fire in registration order at every context
    /// switch. Fails once the simulation has started.
    pub fn register_probe<F>(&mut self, probe: F) -> Result<(), SimError>
    where
        F: FnMut(&ProbeContext<'_>, &mut RandomStream) -> ProbeDecision + 'static,
    {
        if self.scheduler.started {
            return Err(SimError::ProbesFrozen);
        }
        self.scheduler.probes.push(Box::new(probe));
        Ok(())
    }

    pub fn run_queue(&self) -> impl Iterator<Item = Pid> + '_ {
        self.scheduler.run_queue.iter().copied()
    }

    pub fn task_time(&self, pid: Pid) -> Result<Tick, SimError> {
        self.registry.task_time(pid)
    }

    /// Dispatches `next`, which must be at the head of the run queue.
    pub fn context_switch(&mut self, next: Pid) -> Result<SwitchOutcome, SimError> {
        if self.scheduler.run_queue.front() != Some(&next) {
            return Err(SimError::NotAtHead(next));
        }
        self.scheduler.started = true;

        let Simulation {
            scheduler,
            registry,
            rng,
            ..
        } = self;
        let ctx = ProbeContext {
            next,
            registry,
            clock: scheduler.clock,
        };
        let skip = scheduler
            .probes
            .iter_mut()
            .any(|probe| probe(&ctx, rng) == ProbeDecision::Skip);
        if skip {
            self.free_task_with_cause(next, KillCause::Probe)?;
            return Ok(SwitchOutcome::Killed(next));
        }

        self.scheduler.run_queue.pop_front();
        self.emit(EventKind::Schedule { pid: next });
        let network_ops = match self.behaviors.remove(&next) {
            Some(mut behavior) => {
                let mut ctx = StepContext {
                    sim: self,
                    pid: next,
                    network_ops: 0,
                };
                behavior.step(&mut ctx);
                let ops = ctx.network_ops;
                self.behaviors.insert(next, behavior);
                ops
            }
            None => 0,
        };

        let quantum = self.scheduler.quantum;
        let stime = if network_ops > 0 { 1 } else { 0 };
        self.registry.charge(next, quantum - stime, stime);
        self.scheduler.clock += quantum;
        if self.registry.is_runnable(next) {
            self.scheduler.run_queue.push_back(next);
        }
        Ok(SwitchOutcome::Ran(next))
    }

    /// One loop iteration: due scheduled kills, then due deliveries, then a
    /// context switch on the queue head (or an idle quantum).
    pub fn step(&mut self) -> SwitchOutcome {
        self.scheduler.started = true;
        self.apply_due_kills();
        self.deliver_due();
        match self.scheduler.run_queue.front().copied() {
            Some(next) => self
                .context_switch(next)
                .expect("queue head is always runnable"),
            None => {
                self.emit(EventKind::Idle);
                self.scheduler.clock += self.scheduler.quantum;
                SwitchOutcome::Idle
            }
        }
    }

    /// Steps until the clock reaches `until`, or until there is nothing left
    /// to do (empty run queue, nothing in flight).
    pub fn run(&mut self, until: Tick) {
        while self.scheduler.clock < until {
            if self.scheduler.run_queue.is_empty() && self.network.in_flight_count() == 0 {
                break;
            }
            self.step();
        }
    }
}
