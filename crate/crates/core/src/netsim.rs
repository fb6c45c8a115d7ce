//! Simulated connection-oriented transport.
//!
//! Connections only close through [`Simulation::close_clean`]. A task freed
//! by the scheduler keeps its connections ESTABLISHED; messages addressed to
//! it are discarded at delivery time and the sender is never told.

use std::collections::{BTreeMap, VecDeque};

use crate::injector::RandomStream;
use crate::proc_model::Registry;
use crate::trace::EventKind;
use crate::{ConnId, MsgId, Pid, SimError, Simulation, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Established,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connection {
    pub id: ConnId,
    pub a: Pid,
    pub b: Pid,
    pub state: ConnState,
}

impl Connection {
    pub fn peer_of(&self, pid: Pid) -> Option<Pid> {
        if pid == self.a {
            Some(self.b)
        } else if pid == self.b {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn has_endpoint(&self, pid: Pid) -> bool {
        self.peer_of(pid).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub id: MsgId,
    pub conn: ConnId,
    pub sender: Pid,
    pub receiver: Pid,
    pub payload: Vec<u8>,
    pub send_time: Tick,
    pub deliver_time: Tick,
}

/// A network probe's verdict on one outgoing message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetDecision {
    Pass,
    Drop,
    Duplicate,
}

pub struct SendContext<'a> {
    pub message: &'a Message,
    pub registry: &'a Registry,
    pub clock: Tick,
}

pub type NetworkProbe = Box<dyn FnMut(&SendContext<'_>, &mut RandomStream) -> NetDecision>;

pub(crate) struct Network {
    latency: Tick,
    connections: BTreeMap<ConnId, Connection>,
    in_flight: BTreeMap<(Tick, MsgId), Message>,
    inboxes: BTreeMap<Pid, VecDeque<Message>>,
    next_conn: u64,
    next_msg: u64,
    pub(crate) probes: Vec<NetworkProbe>,
}

impl Network {
    pub(crate) fn new(latency: Tick) -> Self {
        Network {
            latency,
            connections: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            inboxes: BTreeMap::new(),
            next_conn: 0,
            next_msg: 0,
            probes: Vec::new(),
        }
    }

    pub(crate) fn in_flight_count(&self) -> usize {
        self.in_flight.len()
    }

    fn fresh_msg_id(&mut self) -> MsgId {
        let id = MsgId(self.next_msg);
        self.next_msg += 1;
        id
    }
}

impl Simulation {
    /// Appends a send-time probe. Like scheduler probes, these must be
    /// registered before the simulation starts.
    pub fn register_net_probe<F>(&mut self, probe: F) -> Result<(), SimError>
    where
        F: FnMut(&SendContext<'_>, &mut RandomStream) -> NetDecision + 'static,
    {
        if self.scheduler.started {
            return Err(SimError::ProbesFrozen);
        }
        self.network.probes.push(Box::new(probe));
        Ok(())
    }

    pub fn open_connection(&mut self, a: Pid, b: Pid) -> Result<ConnId, SimError> {
        for pid in [a, b] {
            let task = self.registry.task(pid).ok_or(SimError::NoSuchTask(pid))?;
            if !task.is_runnable() {
                return Err(SimError::TaskDead(pid));
            }
        }
        let id = ConnId(self.network.next_conn);
        self.network.next_conn += 1;
        self.network.connections.insert(
            id,
            Connection {
                id,
                a,
                b,
                state: ConnState::Established,
            },
        );
        self.emit(EventKind::Open { conn: id, a, b });
        Ok(id)
    }

    pub fn connection(&self, id: ConnId) -> Option<&Connection> {
        self.network.connections.get(&id)
    }

    pub fn connections(&self) -> impl Iterator<Item = &Connection> {
        self.network.connections.values()
    }

    pub fn in_flight_count(&self) -> usize {
        self.network.in_flight_count()
    }

    /// Sends `payload` from `from` to the other endpoint of `conn`.
    ///
    /// Network probes run in registration order after the SEND is traced. A
    /// `Drop` verdict discards the message (and any copies made so far) and
    /// ends the probe pass; each `Duplicate` adds one copy with a fresh id.
    /// A dead receiver is not an error here.
    pub fn send(&mut self, conn: ConnId, from: Pid, payload: &[u8]) -> Result<(), SimError> {
        let connection = self
            .network
            .connections
            .get(&conn)
            .ok_or(SimError::NoSuchConnection(conn))?;
        let to = connection
            .peer_of(from)
            .ok_or(SimError::NotAnEndpoint { pid: from, conn })?;
        if connection.state == ConnState::Closed {
            return Err(SimError::ConnectionClosed(conn));
        }
        if !self.registry.is_runnable(from) {
            return Err(SimError::TaskDead(from));
        }

        let now = self.scheduler.clock;
        let message = Message {
            id: self.network.fresh_msg_id(),
            conn,
            sender: from,
            receiver: to,
            payload: payload.to_vec(),
            send_time: now,
            deliver_time: now + self.network.latency,
        };
        self.emit(EventKind::Send {
            msg: message.id,
            conn,
            from,
            to,
        });

        let mut decisions = Vec::new();
        {
            let Simulation {
                network,
                registry,
                rng,
                ..
            } = self;
            let ctx = SendContext {
                message: &message,
                registry,
                clock: now,
            };
            for probe in network.probes.iter_mut() {
                let decision = probe(&ctx, rng);
                decisions.push(decision);
                if decision == NetDecision::Drop {
                    break;
                }
            }
        }

        let mut copies = vec![message];
        for decision in decisions {
            match decision {
                NetDecision::Pass => {}
                NetDecision::Duplicate => {
                    let mut copy = copies[0].clone();
                    copy.id = self.network.fresh_msg_id();
                    self.emit(EventKind::Duplicate {
                        msg: copies[0].id,
                        copy: copy.id,
                        conn,
                        from,
                        to,
                    });
                    copies.push(copy);
                }
                NetDecision::Drop => {
                    for dropped in copies.drain(..) {
                        self.emit(EventKind::Drop {
                            msg: dropped.id,
                            conn,
                            from,
                            to,
                        });
                    }
                }
            }
        }
        for message in copies {
            self.network
                .in_flight
                .insert((message.deliver_time, message.id), message);
        }
        Ok(())
    }

    /// Delivers every in-flight message due at or before the current clock,
    /// in (deliver_time, id) order. Messages for dead receivers are
    /// blackholed. Returns the delivered messages.
    pub fn deliver_due(&mut self) -> Vec<Message> {
        let now = self.scheduler.clock;
        let mut delivered = Vec::new();
        while let Some(entry) = self.network.in_flight.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let message = entry.remove();
            let (msg, conn, from, to) =
                (message.id, message.conn, message.sender, message.receiver);
            if self.registry.is_runnable(to) {
                self.emit(EventKind::Deliver {
                    msg,
                    conn,
                    from,
                    to,
                });
                self.network
                    .inboxes
                    .entry(to)
                    .or_default()
                    .push_back(message.clone());
                delivered.push(message);
            } else {
                self.emit(EventKind::Blackhole {
                    msg,
                    conn,
                    from,
                    to,
                });
            }
        }
        delivered
    }

    pub fn take_inbox(&mut self, pid: Pid) -> Vec<Message> {
        self.network
            .inboxes
            .remove(&pid)
            .map(Vec::from)
            .unwrap_or_default()
    }

    /// The shutdown an ordinary OS performs for a dying process: every
    /// ESTABLISHED connection of `pid` is closed, one CLOSE event each.
    ///
    /// Refuses dead tasks: once freed at kernel level, nothing is left to
    /// close the sockets.
    pub fn close_clean(&mut self, pid: Pid) -> Result<(), SimError> {
        let task = self.registry.task(pid).ok_or(SimError::NoSuchTask(pid))?;
        if !task.is_runnable() {
            return Err(SimError::TaskDead(pid));
        }
        let to_close: Vec<ConnId> = self
            .network
            .connections
            .values()
            .filter(|c| c.state == ConnState::Established && c.has_endpoint(pid))
            .map(|c| c.id)
            .collect();
        for conn in to_close {
            if let Some(c) = self.network.connections.get_mut(&conn) {
                c.state = ConnState::Closed;
            }
            self.emit(EventKind::Close { conn, pid });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Event;
    use crate::{SimConfig, ROOT_PID};

    fn sim() -> Simulation {
        Simulation::new(SimConfig::default()).unwrap()
    }

    fn kinds(trace: &[Event]) -> Vec<&'static str> {
        trace.iter().map(|e| e.kind.name()).collect()
    }

    fn pair(sim: &mut Simulation) -> (Pid, Pid) {
        (
            sim.spawn(ROOT_PID, "a").unwrap(),
            sim.spawn(ROOT_PID, "b").unwrap(),
        )
    }

    #[test]
    fn open_between_live_tasks() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let c1 = sim.open_connection(a, b).unwrap();
        let c2 = sim.open_connection(a, b).unwrap();
        assert_ne!(c1, c2);
        assert_eq!(sim.connection(c1).unwrap().state, ConnState::Established);
    }

    #[test]
    fn open_to_dead_task_fails() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        sim.free_task(b).unwrap();
        assert_eq!(sim.open_connection(a, b), Err(SimError::TaskDead(b)));
        assert_eq!(
            sim.open_connection(a, Pid(40)),
            Err(SimError::NoSuchTask(Pid(40)))
        );
    }

    #[test]
    fn plain_send_delivers_after_latency() {
        let mut sim = Simulation::new(SimConfig {
            latency: 3,
            ..SimConfig::default()
        })
        .unwrap();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        sim.send(c, a, b"hi").unwrap();
        sim.run(4);
        let inbox = sim.take_inbox(b);
        assert_eq!(inbox.len(), 1);
        assert_eq!(inbox[0].payload, b"hi");
        assert_eq!(inbox[0].deliver_time, 3);
        let deliver = sim
            .trace()
            .iter()
            .find(|e| e.kind.name() == "DELIVER")
            .unwrap();
        assert_eq!(deliver.t, 3);
    }

    #[test]
    fn nothing_due_delivers_nothing() {
        let mut sim = sim();
        assert!(sim.deliver_due().is_empty());
    }

    #[test]
    fn send_to_freed_receiver_is_silently_blackholed() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        sim.free_task(b).unwrap();
        assert_eq!(sim.send(c, a, b"ping"), Ok(()));
        sim.run(2);
        assert_eq!(
            kinds(sim.trace()),
            [
                "SPAWN",
                "SPAWN",
                "OPEN",
                "KILL",
                "SEND",
                "SCHEDULE",
                "BLACKHOLE",
                "SCHEDULE"
            ]
        );
        assert_eq!(sim.connection(c).unwrap().state, ConnState::Established);
    }

    #[test]
    fn receiver_killed_mid_flight() {
        let mut sim = Simulation::new(SimConfig {
            latency: 5,
            ..SimConfig::default()
        })
        .unwrap();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        sim.send(c, a, b"x").unwrap();
        sim.run(2);
        sim.free_task(b).unwrap();
        sim.run(10);
        let names = kinds(sim.trace());
        assert!(names.contains(&"BLACKHOLE"));
        assert!(!names.contains(&"DELIVER"));
    }

    #[test]
    fn clean_close_makes_peer_sends_fail() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        sim.close_clean(b).unwrap();
        sim.free_task(b).unwrap();
        assert_eq!(sim.send(c, a, b"x"), Err(SimError::ConnectionClosed(c)));
        assert_eq!(sim.connection(c).unwrap().state, ConnState::Closed);
    }

    #[test]
    fn close_clean_closes_every_connection_once() {
        let mut sim = sim();
        let p = sim.spawn(ROOT_PID, "p").unwrap();
        let peers: Vec<Pid> = (0..3).map(|_| sim.spawn(ROOT_PID, "q").unwrap()).collect();
        for &q in &peers {
            sim.open_connection(p, q).unwrap();
        }
        sim.close_clean(p).unwrap();
        sim.close_clean(p).unwrap();
        let closes = sim
            .trace()
            .iter()
            .filter(|e| e.kind.name() == "CLOSE")
            .count();
        assert_eq!(closes, 3);
        assert_eq!(sim.close_clean(Pid(77)), Err(SimError::NoSuchTask(Pid(77))));
    }

    #[test]
    fn close_clean_refuses_freed_tasks() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        sim.open_connection(a, b).unwrap();
        sim.free_task(a).unwrap();
        assert_eq!(sim.close_clean(a), Err(SimError::TaskDead(a)));
    }

    #[test]
    fn send_errors() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let outsider = sim.spawn(ROOT_PID, "o").unwrap();
        let c = sim.open_connection(a, b).unwrap();
        assert_eq!(
            sim.send(ConnId(9), a, b""),
            Err(SimError::NoSuchConnection(ConnId(9)))
        );
        assert_eq!(
            sim.send(c, outsider, b""),
            Err(SimError::NotAnEndpoint {
                pid: outsider,
                conn: c
            })
        );
        sim.free_task(a).unwrap();
        assert_eq!(sim.send(c, a, b""), Err(SimError::TaskDead(a)));
    }

    #[test]
    fn duplicate_yields_two_deliveries_with_distinct_ids() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        sim.register_net_probe(|_, _| NetDecision::Duplicate)
            .unwrap();
        sim.send(c, a, b"twice").unwrap();
        sim.run(2);
        let inbox = sim.take_inbox(b);
        assert_eq!(inbox.len(), 2);
        assert_ne!(inbox[0].id, inbox[1].id);
        assert_eq!(inbox[0].payload, inbox[1].payload);
        assert_eq!(inbox[0].conn, inbox[1].conn);
    }

    #[test]
    fn drop_after_duplicate_discards_every_copy() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        sim.register_net_probe(|_, _| NetDecision::Duplicate)
            .unwrap();
        sim.register_net_probe(|_, _| NetDecision::Drop).unwrap();
        sim.register_net_probe(|_, _| unreachable!("drop ends the pass"))
            .unwrap();
        sim.send(c, a, b"x").unwrap();
        assert_eq!(
            kinds(&sim.trace()[3..]),
            ["SEND", "DUPLICATE", "DROP", "DROP"]
        );
        assert_eq!(sim.in_flight_count(), 0);
    }

    #[test]
    fn delivery_order_is_time_then_id() {
        let mut sim = sim();
        let (a, b) = pair(&mut sim);
        let c = sim.open_connection(a, b).unwrap();
        let d = sim.open_connection(b, a).unwrap();
        sim.send(d, b, b"1").unwrap();
        sim.send(c, a, b"2").unwrap();
        sim.send(c, b, b"3").unwrap();
        sim.run(2);
        let delivered: Vec<u64> = sim
            .trace()
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Deliver { msg, .. } => Some(msg.0),
                _ => None,
            })
            .collect();
        assert_eq!(delivered, [0, 1, 2]);
    }
}
