//! Client and server handshake state machines.
//!
//! Endpoints never touch the link directly. Each handler receives a [`Ctx`]
//! for scheduling timers and recording trace events, and returns the
//! datagrams to put on the wire at the current instant, already indexed.

pub mod client;
pub mod server;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::recovery::Space;
use crate::sim::{EventHandle, Scheduler, SimError, SimTime};
use crate::traces::{TraceEvent, TraceKind};
use wire::{Actor, Datagram, Frame, Packet, RangeSet};

pub use client::Client;
pub use server::{Server, ServerConfig};

/// Client Initial datagrams that carry ack-eliciting frames are padded to this.
pub const MIN_INITIAL_DATAGRAM: u64 = 1200;
/// Server Initial packet (ACK + ServerHello) size, fixed in both modes.
pub const SERVER_INITIAL_PACKET: u64 = 150;
/// Crypto and framing bytes added to the certificate chain in the server flight.
pub const FLIGHT_OVERHEAD: u64 = 400;
pub const CLIENT_HELLO_BYTES: u64 = 280;
pub const SERVER_HELLO_BYTES: u64 = 86;
pub const CLIENT_FINISHED_BYTES: u64 = 36;
pub const REQUEST_BYTES: u64 = 100;
pub const SETTINGS_BYTES: u64 = 20;
pub const DEFAULT_MAX_DATAGRAM: u64 = 1252;
pub const DEFAULT_RESPONSE_BYTES: u64 = 10 * 1024;
pub const IDLE_TIMEOUT_US: u64 = 30_000_000;
/// Delay before a client acknowledges an incomplete server flight.
pub const HANDSHAKE_ACK_DELAY_US: u64 = 1_000;
pub const REQUEST_STREAM: u64 = 0;
pub const CONTROL_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerMode {
    Iack,
    Wfc,
}

impl ServerMode {
    pub const ALL: [ServerMode; 2] = [ServerMode::Iack, ServerMode::Wfc];

    pub fn name(self) -> &'static str {
        match self {
            ServerMode::Iack => "iack",
            ServerMode::Wfc => "wfc",
        }
    }
}

impl std::fmt::Display for ServerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ServerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iack" => Ok(ServerMode::Iack),
            "wfc" => Ok(ServerMode::Wfc),
            _ => Err(format!("unknown server mode `{s}`")),
        }
    }
}

/// A datagram leaving an endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub datagram: Datagram,
    /// Sent because a probe timeout expired.
    pub probe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimerKind {
    Pto,
    CertReady,
    /// Delayed acknowledgment of Initial/Handshake data.
    AckFlush,
    /// Delayed acknowledgment of application data.
    AppAck,
    AppDataReady,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Start,
    /// A datagram reaches `to` after link and stack delay.
    Deliver { to: Actor, datagram: Datagram },
    Timer { actor: Actor, kind: TimerKind },
}

pub struct Ctx<'a> {
    pub now: SimTime,
    pub sched: &'a mut Scheduler<Event>,
    pub trace: &'a mut Vec<TraceEvent>,
}

impl Ctx<'_> {
    pub fn record(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    pub fn event(&mut self, actor: Actor, kind: TraceKind) -> &mut TraceEvent {
        self.trace.push(TraceEvent::new(self.now, actor, kind));
        self.trace.last_mut().expect("just pushed")
    }

    pub fn timer(&mut self, at: SimTime, actor: Actor, kind: TimerKind) -> Result<EventHandle, SimError> {
        self.sched.schedule(at, Event::Timer { actor, kind })
    }
}

/// Cancels the timer in `slot` if one is pending.
pub(crate) fn cancel_slot(sched: &mut Scheduler<Event>, slot: &mut Option<EventHandle>) {
    if let Some(h) = slot.take() {
        sched.cancel(h);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SentPacket {
    pub time: SimTime,
    pub eliciting: bool,
    /// Retransmittable frames (CRYPTO, STREAM, PING).
    pub frames: Vec<Frame>,
    pub size: u64,
}

impl SentPacket {
    pub fn has_ping(&self) -> bool {
        self.frames.iter().any(|f| matches!(f, Frame::Ping))
    }

    pub fn has_data(&self) -> bool {
        self.frames
            .iter()
            .any(|f| matches!(f, Frame::Crypto { .. } | Frame::Stream { .. }))
    }
}

#[derive(Debug, Default)]
pub(crate) struct AckOutcome {
    pub newly_acked: Vec<(u64, SentPacket)>,
    /// `(send time, eliciting)` of the largest newly acknowledged packet,
    /// present only if that packet is the largest the peer acknowledged.
    pub largest: Option<(SimTime, bool)>,
}

impl AckOutcome {
    pub fn any_newly_acked(&self) -> bool {
        !self.newly_acked.is_empty()
    }

    /// RTT sample source: the largest acknowledged packet is new and at least
    /// one newly acknowledged packet was ack-eliciting.
    pub fn sample_send_time(&self) -> Option<SimTime> {
        let (t, _) = self.largest?;
        self.newly_acked
            .iter()
            .any(|(_, p)| p.eliciting)
            .then_some(t)
    }
}

/// Per packet-number-space bookkeeping shared by both endpoints.
#[derive(Debug, Default)]
pub(crate) struct SpaceState {
    pub next_pn: u64,
    pub sent: BTreeMap<u64, SentPacket>,
    /// Packets whose data went out again in newer packets. An ACK for one
    /// still counts as newly acknowledging and can yield an RTT sample.
    pub retransmitted: BTreeMap<u64, SentPacket>,
    pub received: RangeSet,
    pub largest_recv_time: Option<SimTime>,
    pub ack_pending: bool,
    pub eliciting_since_ack: u32,
    pub last_eliciting_sent: Option<SimTime>,
    pub discarded: bool,
}

impl SpaceState {
    pub fn packet(&mut self, space: Space, frames: Vec<Frame>) -> Packet {
        let pn = self.next_pn;
        self.next_pn += 1;
        Packet::new(space, pn, frames)
    }

    pub fn on_sent(&mut self, pkt: &Packet, now: SimTime) {
        let frames: Vec<Frame> = pkt
            .frames
            .iter()
            .filter(|f| f.is_ack_eliciting())
            .cloned()
            .collect();
        let eliciting = !frames.is_empty();
        if eliciting {
            self.last_eliciting_sent = Some(now);
        }
        self.sent.insert(
            pkt.number,
            SentPacket {
                time: now,
                eliciting,
                frames,
                size: pkt.size,
            },
        );
        if pkt.ack().is_some() {
            self.ack_pending = false;
            self.eliciting_since_ack = 0;
        }
    }

    /// Returns `false` for duplicates.
    pub fn on_received(&mut self, pkt: &Packet, now: SimTime) -> bool {
        if !self.received.insert(pkt.number) {
            // duplicates of eliciting packets still deserve an ACK
            if pkt.is_ack_eliciting() {
                self.ack_pending = true;
            }
            return false;
        }
        if self.received.largest() == Some(pkt.number) {
            self.largest_recv_time = Some(now);
        }
        if pkt.is_ack_eliciting() {
            self.ack_pending = true;
            self.eliciting_since_ack += 1;
        }
        true
    }

    pub fn ack_frame(&self, now: SimTime) -> Frame {
        Frame::Ack {
            ack_delay_us: self.largest_recv_time.map_or(0, |t| now.since(t)),
            acked: self.received.clone(),
        }
    }

    pub fn process_ack(&mut self, acked: &RangeSet) -> AckOutcome {
        let mut out = AckOutcome::default();
        let mut newly: Vec<u64> = self
            .sent
            .keys()
            .chain(self.retransmitted.keys())
            .copied()
            .filter(|pn| acked.contains(*pn))
            .collect();
        newly.sort_unstable();
        let largest = acked.largest();
        for pn in newly {
            let pkt = self
                .sent
                .remove(&pn)
                .or_else(|| self.retransmitted.remove(&pn))
                .expect("key listed above");
            if Some(pn) == largest {
                out.largest = Some((pkt.time, pkt.eliciting));
            }
            out.newly_acked.push((pn, pkt));
        }
        out
    }

    pub fn eliciting_in_flight(&self) -> bool {
        !self.discarded && self.sent.values().any(|p| p.eliciting)
    }

    /// Takes packets out of flight and returns their retransmittable data
    /// in packet-number order.
    pub fn take_outstanding(&mut self, data_only: bool) -> Vec<(u64, SentPacket)> {
        let pns: Vec<u64> = self
            .sent
            .iter()
            .filter(|(_, p)| p.eliciting && (!data_only || p.has_data()))
            .map(|(pn, _)| *pn)
            .collect();
        pns.into_iter()
            .map(|pn| {
                let pkt = self.sent.remove(&pn).expect("listed");
                self.retransmitted.insert(pn, pkt.clone());
                (pn, pkt)
            })
            .collect()
    }

    pub fn discard(&mut self) {
        self.discarded = true;
        self.sent.clear();
        self.retransmitted.clear();
        self.ack_pending = false;
    }
}

/// Greedily packs packets into datagrams of at most `max` bytes, keeping
/// order. A packet larger than `max` gets a datagram of its own.
pub(crate) fn pack(packets: Vec<Packet>, max: u64) -> Vec<Vec<Packet>> {
    let mut out: Vec<Vec<Packet>> = Vec::new();
    let mut size = 0;
    for p in packets {
        match out.last_mut() {
            Some(cur) if size + p.size <= max => {
                size += p.size;
                cur.push(p);
            }
            _ => {
                size = p.size;
                out.push(vec![p]);
            }
        }
    }
    out
}

/// Pre-validation send budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AmplificationState {
    pub bytes_received: u64,
    pub bytes_sent: u64,
    pub address_validated: bool,
}

pub const AMPLIFICATION_FACTOR: u64 = 3;

impl AmplificationState {
    pub fn can_send(&self, size: u64) -> bool {
        self.address_validated || self.bytes_sent + size <= AMPLIFICATION_FACTOR * self.bytes_received
    }

    /// Bytes that may still be sent before validation.
    pub fn remaining(&self) -> Option<u64> {
        (!self.address_validated).then(|| {
            (AMPLIFICATION_FACTOR * self.bytes_received).saturating_sub(self.bytes_sent)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use wire::CryptoRole;

    fn crypto(len: u64) -> Frame {
        Frame::Crypto {
            role: CryptoRole::CertChain,
            offset: 0,
            length: len,
        }
    }

    #[test]
    fn budget_is_three_times_received() {
        let mut amp = AmplificationState {
            bytes_received: 1_200,
            ..Default::default()
        };
        assert!(amp.can_send(3_600));
        assert!(!amp.can_send(3_601));
        amp.bytes_sent = 2_504;
        assert_eq!(amp.remaining(), Some(1_096));
        assert!(!amp.can_send(1_252));
        amp.address_validated = true;
        assert!(amp.can_send(1_000_000));
        assert_eq!(amp.remaining(), None);
    }

    #[test]
    fn ack_processing_reports_largest() {
        let mut s = SpaceState::default();
        let p0 = s.packet(Space::Initial, vec![crypto(10)]);
        let p1 = s.packet(
            Space::Initial,
            vec![Frame::Ack {
                ack_delay_us: 0,
                acked: RangeSet::new(),
            }],
        );
        s.on_sent(&p0, SimTime(0));
        s.on_sent(&p1, SimTime(5));
        assert!(s.eliciting_in_flight());
        let mut acked = RangeSet::new();
        acked.insert(0);
        let out = s.process_ack(&acked);
        assert_eq!(out.sample_send_time(), Some(SimTime(0)));
        assert!(!s.eliciting_in_flight());
        // acking only the non-eliciting packet yields no sample
        acked.insert(1);
        let out = s.process_ack(&acked);
        assert!(out.any_newly_acked());
        assert_eq!(out.sample_send_time(), None);
        // nothing new
        assert!(!s.process_ack(&acked).any_newly_acked());
    }

    #[test]
    fn ack_delay_measured_from_largest_receipt() {
        let mut s = SpaceState::default();
        let p = Packet::new(Space::Handshake, 0, vec![Frame::Ping]);
        assert!(s.on_received(&p, SimTime(13_000)));
        assert!(s.ack_pending);
        assert!(!s.on_received(&p, SimTime(13_500)));
        match s.ack_frame(SimTime(14_000)) {
            Frame::Ack { ack_delay_us, .. } => assert_eq!(ack_delay_us, 1_000),
            _ => unreachable!(),
        }
    }

    #[test]
    fn packing_respects_limit() {
        let pk = |n| Packet::new(Space::Handshake, 0, vec![crypto(n)]);
        let dgs = pack(vec![pk(100), pk(1000), pk(100), pk(2000)], 1252);
        let sizes: Vec<Vec<u64>> = dgs
            .iter()
            .map(|d| d.iter().map(|p| p.size).collect())
            .collect();
        assert_eq!(sizes, vec![vec![144, 1044], vec![144], vec![2044]]);
    }
}
