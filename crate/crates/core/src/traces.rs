//! Line-delimited JSON event log and the instant-ACK classifier.
//!
//! A trace file starts with a header line
//! `{"format":"iacksim-trace","version":1}` followed by one [`TraceEvent`]
//! object per line. Times are integer microseconds and never decrease.
//!
//! | field | type | notes |
//! |---|---|---|
//! | `time_us` | u64 | |
//! | `actor` | `client`/`server`/`link` | who recorded the event |
//! | `kind` | string | see [`TraceKind`] |
//! | `datagram_index` | u32, optional | 1-based per sender |
//! | `sender` | actor, optional | sender of the datagram for receive/drop |
//! | `space` | string, optional | datagram events: highest space present |
//! | `frames` | list, optional | distinct frame kinds, padding omitted |
//! | `size_bytes` | u64, optional | |
//! | `detail` | map string→i64, optional | e.g. `sample_us`, `pto_us` |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoints::wire::{Actor, Datagram, FrameKind};
use crate::recovery::Space;
use crate::sim::SimTime;

pub const TRACE_FORMAT: &str = "iacksim-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Emit,
    Receive,
    Drop,
    PtoArmed,
    PtoExpired,
    RttSample,
    BudgetBlocked,
    BudgetUnblocked,
    HandshakeComplete,
    FirstAppByte,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub time_us: SimTime,
    pub actor: Actor,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datagram_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<Actor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<Space>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<FrameKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, i64>,
}

impl TraceEvent {
    pub fn new(time: SimTime, actor: Actor, kind: TraceKind) -> Self {
        TraceEvent {
            time_us: time,
            actor,
            kind,
            datagram_index: None,
            sender: None,
            space: None,
            frames: None,
            size_bytes: None,
            detail: BTreeMap::new(),
        }
    }

    /// Fills the datagram fields from `dg`.
    pub fn with_datagram(mut self, dg: &Datagram) -> Self {
        self.datagram_index = Some(dg.index);
        self.sender = Some(dg.sender);
        self.space = dg.packets.iter().map(|p| p.space).max();
        self.frames = Some(dg.frame_kinds());
        self.size_bytes = Some(dg.size());
        self
    }

    pub fn with_space(mut self, space: Space) -> Self {
        self.space = Some(space);
        self
    }

    pub fn with_detail(mut self, key: &str, value: i64) -> Self {
        self.detail.insert(key.to_string(), value);
        self
    }

    pub fn has_frame(&self, kind: FrameKind) -> bool {
        self.frames.as_ref().is_some_and(|f| f.contains(&kind))
    }

    pub fn detail_value(&self, key: &str) -> Option<i64> {
        self.detail.get(key).copied()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: expected trace header")]
    MissingHeader { line: usize },
    #[error("line {line}: unsupported trace version {version}")]
    UnsupportedVersion { line: usize, version: u32 },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: time {time} precedes previous event at {previous}")]
    OutOfOrder {
        line: usize,
        time: SimTime,
        previous: SimTime,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

/// Writes the header and one line per event.
pub fn emit_trace<W: Write>(events: &[TraceEvent], mut out: W) -> io::Result<()> {
    let header = Header {
        format: TRACE_FORMAT.to_string(),
        version: TRACE_VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_string(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    emit_trace(events, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

/// Parses a trace stream. An empty stream yields no events; otherwise the
/// first non-blank line must be the header.
pub fn parse_trace<R: BufRead>(input: R) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut seen_header = false;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            let header: Header = serde_json::from_str(&line)
                .map_err(|_| TraceError::MissingHeader { line: line_no })?;
            if header.format != TRACE_FORMAT {
                return Err(TraceError::MissingHeader { line: line_no });
            }
            if header.version != TRACE_VERSION {
                return Err(TraceError::UnsupportedVersion {
                    line: line_no,
                    version: header.version,
                });
            }
            seen_header = true;
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(prev) = events.last() {
            if ev.time_us < prev.time_us {
                return Err(TraceError::OutOfOrder {
                    line: line_no,
                    time: ev.time_us,
                    previous: prev.time_us,
                });
            }
        }
        events.push(ev);
    }
    Ok(events)
}

/// One server datagram as seen by the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerRecord {
    pub time_us: u64,
    pub contains_ack: bool,
    pub contains_server_hello: bool,
    /// ACK and ServerHello share this datagram.
    pub same_datagram: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ack_delay_us: Option<u64>,
}

impl ServerRecord {
    pub fn new(time_us: u64, contains_ack: bool, contains_server_hello: bool) -> Self {
        ServerRecord {
            time_us,
            contains_ack,
            contains_server_hello,
            same_datagram: contains_ack && contains_server_hello,
            ack_delay_us: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandshakeObservation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub client_hello_time_us: u64,
    pub server_records: Vec<ServerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_rtt_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Iack,
    Coalesced,
    AckOnly,
    NoResponse,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::Iack => "iack",
            Classification::Coalesced => "coalesced",
            Classification::AckOnly => "ack_only",
            Classification::NoResponse => "no_response",
        }
    }
}

fn first_ack(obs: &HandshakeObservation) -> Option<(usize, &ServerRecord)> {
    obs.server_records
        .iter()
        .enumerate()
        .find(|(_, r)| r.contains_ack)
}

/// Looks only at the first server record that carries an ACK.
pub fn classify(obs: &HandshakeObservation) -> Classification {
    let Some((pos, rec)) = first_ack(obs) else {
        return Classification::NoResponse;
    };
    if rec.contains_server_hello {
        return Classification::Coalesced;
    }
    if obs.server_records[pos + 1..]
        .iter()
        .any(|r| r.contains_server_hello)
    {
        Classification::Iack
    } else {
        Classification::AckOnly
    }
}

/// SH arrival minus first ACK arrival; zero when coalesced, `None` otherwise.
pub fn ack_sh_delay(obs: &HandshakeObservation) -> Option<u64> {
    match classify(obs) {
        Classification::Coalesced => Some(0),
        Classification::Iack => {
            let (pos, ack) = first_ack(obs)?;
            let sh = obs.server_records[pos + 1..]
                .iter()
                .find(|r| r.contains_server_hello)?;
            Some(sh.time_us - ack.time_us)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckDelayComparison {
    pub exceeds_rtt: bool,
    /// ack_delay − rtt.
    pub difference_us: i64,
}

/// Compares the first ACK's advertised delay against the measured RTT.
pub fn ack_delay_vs_rtt(obs: &HandshakeObservation) -> Option<AckDelayComparison> {
    let rtt = obs.measured_rtt_us?;
    let delay = first_ack(obs)?.1.ack_delay_us?;
    Some(AckDelayComparison {
        exceeds_rtt: delay > rtt,
        difference_us: delay as i64 - rtt as i64,
    })
}

/// Builds the client-side view of a handshake from a simulator trace.
pub fn observation_from_trace(events: &[TraceEvent]) -> Option<HandshakeObservation> {
    let ch = events.iter().find(|e| {
        e.kind == TraceKind::Emit
            && e.actor == Actor::Client
            && e.has_frame(FrameKind::CryptoClientHello)
    })?;
    let server_records = events
        .iter()
        .filter(|e| {
            e.kind == TraceKind::Receive
                && e.actor == Actor::Client
                && e.sender == Some(Actor::Server)
        })
        .map(|e| {
            let mut rec = ServerRecord::new(
                e.time_us.as_micros(),
                e.has_frame(FrameKind::Ack),
                e.has_frame(FrameKind::CryptoServerHello),
            );
            rec.ack_delay_us = e.detail_value("ack_delay_us").map(|d| d as u64);
            rec
        })
        .collect();
    let measured_rtt_us = events
        .iter()
        .find(|e| e.kind == TraceKind::RttSample && e.actor == Actor::Client)
        .and_then(|e| e.detail_value("sample_us"))
        .map(|v| v as u64);
    Some(HandshakeObservation {
        id: None,
        client_hello_time_us: ch.time_us.as_micros(),
        server_records,
        measured_rtt_us,
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("server sent {sent} B against {received} B received before validation at {time}")]
    AmplificationExceeded {
        time: SimTime,
        sent: u64,
        received: u64,
    },
    #[error("{sender} datagram {index} emitted but never received or dropped")]
    Unmatched { sender: Actor, index: u32 },
    #[error("{sender} datagram {index} emitted twice")]
    DuplicateIndex { sender: Actor, index: u32 },
}

/// Replays server traffic and checks the 3× budget held until the first
/// client Handshake packet reached the server.
pub fn audit_amplification(events: &[TraceEvent]) -> Result<(), AuditError> {
    let mut received = 0u64;
    let mut sent = 0u64;
    for e in events {
        match (e.kind, e.actor) {
            (TraceKind::Receive, Actor::Server) => {
                received += e.size_bytes.unwrap_or(0);
                if e.space.is_some_and(|s| s >= Space::Handshake) {
                    return Ok(());
                }
            }
            (TraceKind::Emit, Actor::Server) => {
                sent += e.size_bytes.unwrap_or(0);
                if sent > 3 * received {
                    return Err(AuditError::AmplificationExceeded {
                        time: e.time_us,
                        sent,
                        received,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Every emitted datagram must be received or dropped, except for those
/// still in flight when the run ended (pass `allow_in_flight`).
pub fn audit_delivery(events: &[TraceEvent], allow_in_flight: bool) -> Result<(), AuditError> {
    let mut emitted: HashMap<(Actor, u32), usize> = HashMap::new();
    let mut settled: HashSet<(Actor, u32)> = HashSet::new();
    for e in events {
        let Some(index) = e.datagram_index else {
            continue;
        };
        match e.kind {
            TraceKind::Emit => {
                if emitted.insert((e.actor, index), 0).is_some() {
                    return Err(AuditError::DuplicateIndex {
                        sender: e.actor,
                        index,
                    });
                }
            }
            TraceKind::Receive | TraceKind::Drop => {
                if let Some(sender) = e.sender {
                    settled.insert((sender, index));
                }
            }
            _ => {}
        }
    }
    if allow_in_flight {
        return Ok(());
    }
    let mut missing: Vec<_> = emitted.keys().filter(|k| !settled.contains(k)).collect();
    missing.sort();
    match missing.first() {
        Some(&&(sender, index)) => Err(AuditError::Unmatched { sender, index }),
        None => Ok(()),
    }
}
