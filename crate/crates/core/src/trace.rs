//! Audit trace and its NDJSON encoding.
//!
//! Every event serializes as one JSON object with `"t"` first, `"kind"`
//! second, and then the kind-specific keys in the fixed order listed on each
//! [`EventKind`] variant. Events appear in execution order, so timestamps are
//! non-decreasing and ties keep the order in which the simulator performed
//! the actions.

use std::fmt;
use std::io::{self, Write};

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::{ConnId, MsgId, Pid, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KillCause {
    /// A scheduler probe answered `Skip`.
    Probe,
    /// `free_task` was called directly (scripted kill, test code).
    Direct,
}

impl KillCause {
    pub fn as_str(self) -> &'static str {
        match self {
            KillCause::Probe => "probe",
            KillCause::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub t: Tick,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    /// `pid`, `ppid`, `group`, `name`
    Spawn {
        pid: Pid,
        ppid: Pid,
        group: String,
        name: String,
    },
    /// `pid`
    Schedule {
        pid: Pid,
    },
    Idle,
    /// `pid`, `group`, `cause`
    Kill {
        pid: Pid,
        group: String,
        cause: KillCause,
    },
    /// `pid`, `reason`
    Warn {
        pid: Pid,
        reason: String,
    },
    /// `conn`, `a`, `b`
    Open {
        conn: ConnId,
        a: Pid,
        b: Pid,
    },
    /// `msg`, `conn`, `from`, `to`
    Send {
        msg: MsgId,
        conn: ConnId,
        from: Pid,
        to: Pid,
    },
    /// `msg`, `conn`, `from`, `to`
    Deliver {
        msg: MsgId,
        conn: ConnId,
        from: Pid,
        to: Pid,
    },
    /// `msg`, `conn`, `from`, `to`
    Drop {
        msg: MsgId,
        conn: ConnId,
        from: Pid,
        to: Pid,
    },
    /// `msg`, `copy`, `conn`, `from`, `to`
    Duplicate {
        msg: MsgId,
        copy: MsgId,
        conn: ConnId,
        from: Pid,
        to: Pid,
    },
    /// `msg`, `conn`, `from`, `to`
    Blackhole {
        msg: MsgId,
        conn: ConnId,
        from: Pid,
        to: Pid,
    },
    /// `conn`, `pid` (the task whose clean shutdown closed it)
    Close {
        conn: ConnId,
        pid: Pid,
    },
    /// `observer`, `subject`
    Suspect {
        observer: Pid,
        subject: Pid,
    },
}

impl EventKind {
    pub const NAMES: [&'static str; 13] = [
        "SPAWN",
        "SCHEDULE",
        "IDLE",
        "KILL",
        "OPEN",
        "SEND",
        "DELIVER",
        "DROP",
        "DUPLICATE",
        "BLACKHOLE",
        "CLOSE",
        "SUSPECT",
        "WARN",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Spawn { .. } => "SPAWN",
            EventKind::Schedule { .. } => "SCHEDULE",
            EventKind::Idle => "IDLE",
            EventKind::Kill { .. } => "KILL",
            EventKind::Warn { .. } => "WARN",
            EventKind::Open { .. } => "OPEN",
            EventKind::Send { .. } => "SEND",
            EventKind::Deliver { .. } => "DELIVER",
            EventKind::Drop { .. } => "DROP",
            EventKind::Duplicate { .. } => "DUPLICATE",
            EventKind::Blackhole { .. } => "BLACKHOLE",
            EventKind::Close { .. } => "CLOSE",
            EventKind::Suspect { .. } => "SUSPECT",
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json_line())
    }
}

impl Serialize for Event {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("t", &self.t)?;
        map.serialize_entry("kind", self.kind.name())?;
        match &self.kind {
            EventKind::Spawn {
                pid,
                ppid,
                group,
                name,
            } => {
                map.serialize_entry("pid", pid)?;
                map.serialize_entry("ppid", ppid)?;
                map.serialize_entry("group", group)?;
                map.serialize_entry("name", name)?;
            }
            EventKind::Schedule { pid } => map.serialize_entry("pid", pid)?,
            EventKind::Idle => {}
            EventKind::Kill { pid, group, cause } => {
                map.serialize_entry("pid", pid)?;
                map.serialize_entry("group", group)?;
                map.serialize_entry("cause", cause.as_str())?;
            }
            EventKind::Warn { pid, reason } => {
                map.serialize_entry("pid", pid)?;
                map.serialize_entry("reason", reason)?;
            }
            EventKind::Open { conn, a, b } => {
                map.serialize_entry("conn", conn)?;
                map.serialize_entry("a", a)?;
                map.serialize_entry("b", b)?;
            }
            EventKind::Send {
                msg,
                conn,
                from,
                to,
            }
            | EventKind::Deliver {
                msg,
                conn,
                from,
                to,
            }
            | EventKind::Drop {
                msg,
                conn,
                from,
                to,
            }
            | EventKind::Blackhole {
                msg,
                conn,
                from,
                to,
            } => {
                map.serialize_entry("msg", msg)?;
                map.serialize_entry("conn", conn)?;
                map.serialize_entry("from", from)?;
                map.serialize_entry("to", to)?;
            }
            EventKind::Duplicate {
                msg,
                copy,
                conn,
                from,
                to,
            } => {
                map.serialize_entry("msg", msg)?;
                map.serialize_entry("copy", copy)?;
                map.serialize_entry("conn", conn)?;
                map.serialize_entry("from", from)?;
                map.serialize_entry("to", to)?;
            }
            EventKind::Close { conn, pid } => {
                map.serialize_entry("conn", conn)?;
                map.serialize_entry("pid", pid)?;
            }
            EventKind::Suspect { observer, subject } => {
                map.serialize_entry("observer", observer)?;
                map.serialize_entry("subject", subject)?;
            }
        }
        map.end()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

impl Event {
    pub fn new(t: Tick, kind: EventKind) -> Self {
        Event { t, kind }
    }

    /// Single-line JSON encoding, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Event, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let Value::Object(obj) = value else {
            return Err("event is not a JSON object".into());
        };
        let fields = Fields(&obj);
        let t = fields.u64("t")?;
        let kind = match fields.str("kind")? {
            "SPAWN" => EventKind::Spawn {
                pid: fields.pid("pid")?,
                ppid: fields.pid("ppid")?,
                group: fields.str("group")?.to_owned(),
                name: fields.str("name")?.to_owned(),
            },
            "SCHEDULE" => EventKind::Schedule {
                pid: fields.pid("pid")?,
            },
            "IDLE" => EventKind::Idle,
            "KILL" => EventKind::Kill {
                pid: fields.pid("pid")?,
                group: fields.str("group")?.to_owned(),
                cause: match fields.str("cause")? {
                    "probe" => KillCause::Probe,
                    "direct" => KillCause::Direct,
                    other => return Err(format!("unknown kill cause {other:?}")),
                },
            },
            "WARN" => EventKind::Warn {
                pid: fields.pid("pid")?,
                reason: fields.str("reason")?.to_owned(),
            },
            "OPEN" => EventKind::Open {
                conn: fields.conn("conn")?,
                a: fields.pid("a")?,
                b: fields.pid("b")?,
            },
            "SEND" => EventKind::Send {
                msg: fields.msg("msg")?,
                conn: fields.conn("conn")?,
                from: fields.pid("from")?,
                to: fields.pid("to")?,
            },
            "DELIVER" => EventKind::Deliver {
                msg: fields.msg("msg")?,
                conn: fields.conn("conn")?,
                from: fields.pid("from")?,
                to: fields.pid("to")?,
            },
            "DROP" => EventKind::Drop {
                msg: fields.msg("msg")?,
                conn: fields.conn("conn")?,
                from: fields.pid("from")?,
                to: fields.pid("to")?,
            },
            "DUPLICATE" => EventKind::Duplicate {
                msg: fields.msg("msg")?,
                copy: fields.msg("copy")?,
                conn: fields.conn("conn")?,
                from: fields.pid("from")?,
                to: fields.pid("to")?,
            },
            "BLACKHOLE" => EventKind::Blackhole {
                msg: fields.msg("msg")?,
                conn: fields.conn("conn")?,
                from: fields.pid("from")?,
                to: fields.pid("to")?,
            },
            "CLOSE" => EventKind::Close {
                conn: fields.conn("conn")?,
                pid: fields.pid("pid")?,
            },
            "SUSPECT" => EventKind::Suspect {
                observer: fields.pid("observer")?,
                subject: fields.pid("subject")?,
            },
            other => return Err(format!("unknown event kind {other:?}")),
        };
        Ok(Event { t, kind })
    }
}

struct Fields<'a>(&'a Map<String, Value>);

impl Fields<'_> {
    fn get(&self, key: &str) -> Result<&Value, String> {
        self.0
            .get(key)
            .ok_or_else(|| format!("missing key {key:?}"))
    }

    fn u64(&self, key: &str) -> Result<u64, String> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| format!("key {key:?} is not a non-negative integer"))
    }

    fn str(&self, key: &str) -> Result<&str, String> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| format!("key {key:?} is not a string"))
    }

    fn pid(&self, key: &str) -> Result<Pid, String> {
        self.u64(key).map(Pid)
    }

    fn conn(&self, key: &str) -> Result<ConnId, String> {
        self.u64(key).map(ConnId)
    }

    fn msg(&self, key: &str) -> Result<MsgId, String> {
        self.u64(key).map(MsgId)
    }
}

/// Writes one event per line, LF-terminated.
pub fn write_ndjson<W: Write>(events: &[Event], mut out: W) -> io::Result<()> {
    for event in events {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_ndjson(events: &[Event]) -> String {
    let mut buf = Vec::new();
    write_ndjson(events, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("JSON output is UTF-8")
}

/// Parses an NDJSON trace. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_ndjson(text: &str) -> Result<Vec<Event>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(index, line)| {
            Event::from_json_line(line).map_err(|message| TraceError {
                line: index + 1,
                message,
            })
        })
        .collect()
}
