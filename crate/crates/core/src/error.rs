use thiserror::Error;

use crate::{ConnId, Pid};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("no such parent: {0}")]
    NoSuchParent(Pid),
    #[error("no such task: {0}")]
    NoSuchTask(Pid),
    #[error("task {0} is dead")]
    TaskDead(Pid),
    #[error("malformed group path {0:?}: expected \"/\" or \"/<name>\"")]
    MalformedGroupPath(String),
    #[error("probes must be registered before the simulation starts")]
    ProbesFrozen,
    #[error("task {0} is not at the head of the run queue")]
    NotAtHead(Pid),
    #[error("randint bound must be at least 1")]
    EmptyRange,
    #[error("{scenario} scenarios cannot be installed as {wanted} probes")]
    WrongProbeKind {
        scenario: &'static str,
        wanted: &'static str,
    },
    #[error("no such connection: {0}")]
    NoSuchConnection(ConnId),
    #[error("connection closed: {0}")]
    ConnectionClosed(ConnId),
    #[error("task {pid} is not an endpoint of connection {conn}")]
    NotAnEndpoint { pid: Pid, conn: ConnId },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
