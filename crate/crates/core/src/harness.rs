//! A small run-time environment for exercising failure detection.
//!
//! `n` daemons are launched into one control group and fully connected.
//! Each daemon, whenever it is scheduled, reads its inbox, sends a heartbeat
//! to every peer it does not yet suspect once `heartbeat_period` ticks have
//! passed since its last round, and then runs a timeout detector.
//!
//! Detection here means "the observer added the subject to its suspected
//! set", which is traced as a SUSPECT event. After a fail-stop kill the only
//! signal is silence, so detection waits for `suspicion_timeout`. After a
//! clean close the next heartbeat send fails with "connection closed" and the
//! peer is suspected on the spot.

use std::collections::{BTreeMap, BTreeSet};

use crate::scheduler::{Behavior, StepContext};
use crate::trace::{Event, EventKind};
use crate::{ConnId, Pid, SimError, Simulation, Tick, ROOT_PID};

const HEARTBEAT: &[u8] = b"heartbeat";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DaemonConfig {
    pub heartbeat_period: Tick,
    pub suspicion_timeout: Tick,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        DaemonConfig {
            heartbeat_period: 10,
            suspicion_timeout: 35,
        }
    }
}

impl DaemonConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.heartbeat_period == 0 {
            return Err(SimError::InvalidConfig(
                "heartbeat period must be at least 1".into(),
            ));
        }
        if self.suspicion_timeout <= self.heartbeat_period {
            return Err(SimError::InvalidConfig(format!(
                "suspicion timeout {} must exceed heartbeat period {}",
                self.suspicion_timeout, self.heartbeat_period
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Daemon {
    pub pid: Pid,
    pub peers: Vec<Pid>,
    pub config: DaemonConfig,
    pub last_heard: BTreeMap<Pid, Tick>,
    pub suspected: BTreeSet<Pid>,
    conns: BTreeMap<Pid, ConnId>,
    last_round: Option<Tick>,
    refused: BTreeSet<Pid>,
}

impl Daemon {
    pub fn new(
        pid: Pid,
        conns: BTreeMap<Pid, ConnId>,
        config: DaemonConfig,
        started_at: Tick,
    ) -> Self {
        let peers: Vec<Pid> = conns.keys().copied().collect();
        Daemon {
            pid,
            last_heard: peers.iter().map(|&p| (p, started_at)).collect(),
            peers,
            config,
            suspected: BTreeSet::new(),
            conns,
            last_round: None,
            refused: BTreeSet::new(),
        }
    }

    /// Records a refused send to `peer` (its connection was closed).
    pub fn note_refused(&mut self, peer: Pid) {
        self.refused.insert(peer);
    }

    /// Suspects every peer that refused a send or has been silent for more
    /// than `suspicion_timeout`. Returns the newly suspected peers.
    pub fn detector_step(&mut self, clock: Tick) -> Vec<Pid> {
        let mut fresh = Vec::new();
        for &peer in &self.peers {
            if self.suspected.contains(&peer) {
                continue;
            }
            let silent_for = clock.saturating_sub(self.last_heard[&peer]);
            if self.refused.contains(&peer) || silent_for > self.config.suspicion_timeout {
                self.suspected.insert(peer);
                fresh.push(peer);
            }
        }
        fresh
    }

    fn heartbeat_due(&self, clock: Tick) -> bool {
        self.last_round
            .is_none_or(|last| clock - last >= self.config.heartbeat_period)
    }
}

impl Behavior for Daemon {
    fn step(&mut self, ctx: &mut StepContext<'_>) {
        let clock = ctx.clock();
        for message in ctx.recv() {
            if let Some(heard) = self.last_heard.get_mut(&message.sender) {
                *heard = clock;
            }
        }

        if self.heartbeat_due(clock) {
            self.last_round = Some(clock);
            let targets: Vec<(Pid, ConnId)> = self
                .conns
                .iter()
                .filter(|(peer, _)| !self.suspected.contains(peer))
                .map(|(&peer, &conn)| (peer, conn))
                .collect();
            for (peer, conn) in targets {
                match ctx.send(conn, HEARTBEAT) {
                    Ok(()) => {}
                    Err(SimError::ConnectionClosed(_)) => self.note_refused(peer),
                    Err(e) => panic!("daemon {} failed to send: {e}", self.pid),
                }
            }
        }

        for subject in self.detector_step(clock) {
            ctx.suspect(subject);
        }
    }
}

/// Launches `n` fully connected daemons into `group`, as children of
/// `initd`. Returns their pids in launch order.
pub fn start_runtime(
    sim: &mut Simulation,
    n: usize,
    group: &str,
    config: DaemonConfig,
) -> Result<Vec<Pid>, SimError> {
    if n < 2 {
        return Err(SimError::InvalidConfig(format!(
            "a runtime needs at least 2 daemons, got {n}"
        )));
    }
    config.validate()?;
    let pids = (0..n)
        .map(|i| sim.exec_in_group(group, ROOT_PID, &format!("daemon-{i}")))
        .collect::<Result<Vec<_>, _>>()?;

    let mut conns: BTreeMap<Pid, BTreeMap<Pid, ConnId>> = BTreeMap::new();
    for (i, &a) in pids.iter().enumerate() {
        for &b in &pids[i + 1..] {
            let conn = sim.open_connection(a, b)?;
            conns.entry(a).or_default().insert(b, conn);
            conns.entry(b).or_default().insert(a, conn);
        }
    }
    let now = sim.clock();
    for &pid in &pids {
        let daemon = Daemon::new(pid, conns.remove(&pid).unwrap_or_default(), config, now);
        sim.attach(pid, daemon)?;
    }
    Ok(pids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub observer: Pid,
    pub subject: Pid,
    pub kill_time: Tick,
    pub suspect_time: Tick,
    pub latency: Tick,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatencyReport {
    pub records: Vec<DetectionRecord>,
    /// (observer, subject) pairs where the observer outlived the kill but
    /// never suspected the subject.
    pub undetected: Vec<(Pid, Pid)>,
    /// (observer, subject) pairs where the suspicion predates the kill.
    pub premature: Vec<(Pid, Pid)>,
}

impl LatencyReport {
    pub fn min(&self) -> Option<Tick> {
        self.records.iter().map(|r| r.latency).min()
    }

    pub fn max(&self) -> Option<Tick> {
        self.records.iter().map(|r| r.latency).max()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let total: Tick = self.records.iter().map(|r| r.latency).sum();
        Some(total as f64 / self.records.len() as f64)
    }
}

/// Pairs each KILL with the SUSPECT events it caused.
///
/// A killed task's observers are the tasks that ever sent to it or
/// suspected it. Observers that were themselves dead by the kill are
/// ignored.
pub fn measure_latencies(trace: &[Event]) -> LatencyReport {
    let mut kills: Vec<(Pid, Tick)> = Vec::new();
    let mut killed_at: BTreeMap<Pid, Tick> = BTreeMap::new();
    let mut observers: BTreeMap<Pid, BTreeSet<Pid>> = BTreeMap::new();
    let mut suspicions: BTreeMap<(Pid, Pid), Tick> = BTreeMap::new();

    for event in trace {
        match event.kind {
            EventKind::Kill { pid, .. } => {
                if let std::collections::btree_map::Entry::Vacant(slot) = killed_at.entry(pid) {
                    slot.insert(event.t);
                    kills.push((pid, event.t));
                }
            }
            EventKind::Send { from, to, .. } => {
                observers.entry(to).or_default().insert(from);
            }
            EventKind::Suspect { observer, subject } => {
                observers.entry(subject).or_default().insert(observer);
                suspicions.entry((observer, subject)).or_insert(event.t);
            }
            _ => {}
        }
    }

    let mut report = LatencyReport::default();
    for (subject, kill_time) in kills {
        let Some(peers) = observers.get(&subject) else {
            continue;
        };
        for &observer in peers {
            if observer == subject {
                continue;
            }
            if killed_at.get(&observer).is_some_and(|&t| t <= kill_time) {
                continue;
            }
            match suspicions.get(&(observer, subject)) {
                Some(&suspect_time) if suspect_time >= kill_time => {
                    report.records.push(DetectionRecord {
                        observer,
                        subject,
                        kill_time,
                        suspect_time,
                        latency: suspect_time - kill_time,
                    })
                }
                Some(_) => report.premature.push((observer, subject)),
                None => report.undetected.push((observer, subject)),
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ConnState, KillMode, SimConfig};

    fn sim() -> Simulation {
        Simulation::new(SimConfig::default()).unwrap()
    }

    #[test]
    fn runtime_is_fully_connected() {
        for (n, edges) in [(2, 1), (5, 10)] {
            let mut sim = sim();
            let pids = start_runtime(&mut sim, n, "/xp", DaemonConfig::default()).unwrap();
            assert_eq!(pids.len(), n);
            assert_eq!(sim.connections().count(), edges);
            assert!(pids.iter().all(|&p| sim.find_group(p) == "/xp"));
            let d = sim.behavior::<Daemon>(pids[0]).unwrap();
            assert_eq!(d.peers.len(), n - 1);
        }
    }

    #[test]
    fn runtime_needs_two_daemons() {
        let mut sim = sim();
        assert!(matches!(
            start_runtime(&mut sim, 1, "/xp", DaemonConfig::default()),
            Err(SimError::InvalidConfig(_))
        ));
    }

    #[test]
    fn timeout_must_exceed_period() {
        let bad = DaemonConfig {
            heartbeat_period: 10,
            suspicion_timeout: 10,
        };
        assert!(start_runtime(&mut sim(), 3, "/xp", bad).is_err());
    }

    #[test]
    fn detector_step_thresholds() {
        let conns = BTreeMap::from([(Pid(3), ConnId(0)), (Pid(4), ConnId(1))]);
        let mut d = Daemon::new(Pid(2), conns, DaemonConfig::default(), 0);
        assert!(d.detector_step(35).is_empty());
        d.last_heard.insert(Pid(3), 30);
        assert_eq!(d.detector_step(36), vec![Pid(4)]);
        // never un-suspected, never reported twice
        d.last_heard.insert(Pid(4), 36);
        assert!(d.detector_step(40).is_empty());
        assert!(d.suspected.contains(&Pid(4)));
        d.note_refused(Pid(3));
        assert_eq!(d.detector_step(41), vec![Pid(3)]);
    }

    #[test]
    fn healthy_runtime_suspects_no_one() {
        let mut sim = sim();
        let pids = start_runtime(&mut sim, 5, "/xp", DaemonConfig::default()).unwrap();
        sim.run(2_000);
        for pid in pids {
            assert!(sim.behavior::<Daemon>(pid).unwrap().suspected.is_empty());
        }
        assert!(!sim.trace().iter().any(|e| e.kind.name() == "SUSPECT"));
    }

    // Kill tick 45 lands right after the victim's heartbeat round at 44.
    // With quantum 1 the five daemons run at ticks congruent to their index
    // mod 5 until the kill, then the four survivors rotate with period 4.
    //
    // Fail-stop: the round sent at 44 is delivered at 45 and read by
    // observers at 45, 46, 47, 48. Each suspects at its first slot with
    // clock - last_heard > 35: ticks 81, 82, 83, 84.
    //
    // Clean close: observers last sent at 40, 41, 42, 43. Their next rounds
    // fall on their first slot at least 10 ticks later: 53, 54, 55, 56, and
    // that send is refused.
    fn kill_one(mode: KillMode) -> (Vec<Pid>, Simulation) {
        let mut sim = sim();
        let pids = start_runtime(&mut sim, 5, "/xp", DaemonConfig::default()).unwrap();
        sim.schedule_kill(45, pids[4], mode).unwrap();
        sim.run(150);
        (pids, sim)
    }

    #[test]
    fn fail_stop_detection_waits_for_the_timeout() {
        let (pids, sim) = kill_one(KillMode::FailStop);
        let report = measure_latencies(sim.trace());
        let got: Vec<(Pid, Tick, Tick)> = report
            .records
            .iter()
            .map(|r| (r.observer, r.suspect_time, r.latency))
            .collect();
        assert_eq!(
            got,
            vec![
                (pids[0], 81, 36),
                (pids[1], 82, 37),
                (pids[2], 83, 38),
                (pids[3], 84, 39)
            ]
        );
        assert!(report.undetected.is_empty());
        assert!(sim.connections().all(|c| c.state == ConnState::Established));
    }

    #[test]
    fn clean_close_detection_is_immediate_on_next_send() {
        let (pids, sim) = kill_one(KillMode::CleanClose);
        let report = measure_latencies(sim.trace());
        let got: Vec<(Pid, Tick, Tick)> = report
            .records
            .iter()
            .map(|r| (r.observer, r.suspect_time, r.latency))
            .collect();
        assert_eq!(
            got,
            vec![
                (pids[0], 53, 8),
                (pids[1], 54, 9),
                (pids[2], 55, 10),
                (pids[3], 56, 11)
            ]
        );
    }

    #[test]
    fn no_kills_no_records() {
        let mut sim = sim();
        start_runtime(&mut sim, 3, "/xp", DaemonConfig::default()).unwrap();
        sim.run(100);
        assert_eq!(measure_latencies(sim.trace()), LatencyReport::default());
    }

    #[test]
    fn short_run_leaves_kill_undetected() {
        let mut sim = sim();
        let pids = start_runtime(&mut sim, 3, "/xp", DaemonConfig::default()).unwrap();
        sim.schedule_kill(20, pids[0], KillMode::FailStop).unwrap();
        sim.run(30);
        let report = measure_latencies(sim.trace());
        assert!(report.records.is_empty());
        assert_eq!(
            report.undetected,
            vec![(pids[1], pids[0]), (pids[2], pids[0])]
        );
    }

    #[test]
    fn suspicion_before_kill_is_premature() {
        let trace = vec![
            Event::new(
                5,
                EventKind::Suspect {
                    observer: Pid(2),
                    subject: Pid(3),
                },
            ),
            Event::new(
                9,
                EventKind::Kill {
                    pid: Pid(3),
                    group: "/xp".into(),
                    cause: crate::KillCause::Direct,
                },
            ),
        ];
        let report = measure_latencies(&trace);
        assert_eq!(report.premature, vec![(Pid(2), Pid(3))]);
        assert!(report.records.is_empty());
    }
}
