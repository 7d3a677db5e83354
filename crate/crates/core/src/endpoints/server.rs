use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::netem::serialization_us;
use crate::recovery::{PtoState, RttEstimator, Space, DEFAULT_MAX_ACK_DELAY_US, GRANULARITY_US};
use crate::sim::{EventHandle, Scheduler, SimError, SimTime};
use crate::traces::{TraceEvent, TraceKind};

use super::wire::{header_overhead, Actor, CryptoRole, Datagram, Frame, Packet, ACK_FRAME_BYTES, CRYPTO_FRAME_HEADER, STREAM_FRAME_HEADER};
use super::{
    cancel_slot, pack, AmplificationState, Ctx, Event, Outgoing, ServerMode, SpaceState, TimerKind,
    CONTROL_STREAM, DEFAULT_MAX_DATAGRAM, DEFAULT_RESPONSE_BYTES, FLIGHT_OVERHEAD, IDLE_TIMEOUT_US,
    MIN_INITIAL_DATAGRAM, REQUEST_STREAM, SERVER_HELLO_BYTES, SERVER_INITIAL_PACKET, SETTINGS_BYTES,
};

type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub mode: ServerMode,
    /// Frontend to certificate-store delay.
    pub delta_t_us: u64,
    pub cert_bytes: u64,
    pub pad_iack: bool,
    pub default_pto_us: u64,
    pub early_settings: bool,
    pub response_bytes: u64,
    pub max_datagram_size: u64,
    /// Response pacing rate; zero sends the whole response at once.
    pub pacing_bits_per_s: u64,
    pub probe_count: u8,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            mode: ServerMode::Iack,
            delta_t_us: 0,
            cert_bytes: 1212,
            pad_iack: false,
            default_pto_us: 200_000,
            early_settings: false,
            response_bytes: DEFAULT_RESPONSE_BYTES,
            max_datagram_size: DEFAULT_MAX_DATAGRAM,
            pacing_bits_per_s: 0,
            probe_count: 1,
        }
    }
}

impl ServerConfig {
    /// IACK without a certificate delay has nothing to acknowledge early and
    /// behaves like WFC.
    pub fn effective_mode(&self) -> ServerMode {
        if self.delta_t_us == 0 {
            ServerMode::Wfc
        } else {
            self.mode
        }
    }

    /// Datagram sizes of the first server flight (ServerHello through
    /// Finished), before any IACK.
    pub fn flight_datagram_sizes(&self) -> Vec<u64> {
        let total = self.cert_bytes + FLIGHT_OVERHEAD;
        let max = self.max_datagram_size;
        let mut sizes = vec![max; (total / max) as usize];
        if !total.is_multiple_of(max) {
            sizes.push(total % max);
        }
        sizes
    }
}

#[derive(Debug)]
pub struct Server {
    cfg: ServerConfig,
    rtt: RttEstimator,
    pto: PtoState,
    armed_at: Option<SimTime>,
    spaces: [SpaceState; 3],
    next_index: u32,
    amp: AmplificationState,
    withheld: VecDeque<(Datagram, bool)>,
    client_hello_seen: bool,
    has_handshake_keys: bool,
    cert_timer: Option<EventHandle>,
    flight_sent: bool,
    handshake_complete_at: Option<SimTime>,
    request_received: bool,
    early_requests: u32,
    response_offset: u64,
    response_started: bool,
    pacing_timer: Option<EventHandle>,
    speedup_used: bool,
    idle: Option<EventHandle>,
    closed: bool,
    probes_sent: u32,
}

impl Server {
    pub fn new(cfg: ServerConfig) -> Self {
        Server {
            cfg,
            rtt: RttEstimator::new(DEFAULT_MAX_ACK_DELAY_US),
            pto: PtoState::new(Space::Initial),
            armed_at: None,
            spaces: Default::default(),
            next_index: 1,
            amp: AmplificationState::default(),
            withheld: VecDeque::new(),
            client_hello_seen: false,
            has_handshake_keys: false,
            cert_timer: None,
            flight_sent: false,
            handshake_complete_at: None,
            request_received: false,
            early_requests: 0,
            response_offset: 0,
            response_started: false,
            pacing_timer: None,
            speedup_used: false,
            idle: None,
            closed: false,
            probes_sent: 0,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn amplification(&self) -> &AmplificationState {
        &self.amp
    }

    pub fn rtt(&self) -> &RttEstimator {
        &self.rtt
    }

    pub fn handshake_complete_at(&self) -> Option<SimTime> {
        self.handshake_complete_at
    }

    pub fn probes_sent(&self) -> u32 {
        self.probes_sent
    }

    /// Requests that arrived before the client Finished.
    pub fn early_requests(&self) -> u32 {
        self.early_requests
    }

    pub fn close(&mut self, sched: &mut Scheduler<Event>) {
        self.closed = true;
        self.pto.disarm(sched);
        cancel_slot(sched, &mut self.cert_timer);
        cancel_slot(sched, &mut self.pacing_timer);
        cancel_slot(sched, &mut self.idle);
    }

    fn space(&mut self, space: Space) -> &mut SpaceState {
        &mut self.spaces[space.index()]
    }

    fn can_decrypt(&self, space: Space) -> bool {
        match space {
            Space::Initial => !self.spaces[0].discarded,
            Space::Handshake => self.has_handshake_keys,
            Space::Application => self.flight_sent,
        }
    }

    /// ACKs go out immediately once the flight is sent, and from the start
    /// when acknowledging instantly.
    fn acks_allowed(&self) -> bool {
        self.flight_sent || self.cfg.effective_mode() == ServerMode::Iack
    }

    fn blocked(&self) -> bool {
        !self.withheld.is_empty()
    }

    pub fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dg: &Datagram) -> Result<Vec<Outgoing>> {
        if self.closed {
            return Ok(Vec::new());
        }
        cancel_slot(ctx.sched, &mut self.idle);
        self.idle = Some(ctx.timer(ctx.now + IDLE_TIMEOUT_US, Actor::Server, TimerKind::Idle)?);
        self.amp.bytes_received += dg.size();

        let mut first_client_hello = false;
        let mut duplicate_client_hello = false;
        for pkt in &dg.packets {
            if pkt.space == Space::Handshake && !self.amp.address_validated {
                self.amp.address_validated = true;
                self.spaces[0].discard();
            }
            if !self.can_decrypt(pkt.space) {
                continue;
            }
            let idx = pkt.space.index();
            self.spaces[idx].on_received(pkt, ctx.now);
            if let Some((acked, ack_delay)) = pkt.ack() {
                let outcome = self.spaces[idx].process_ack(acked);
                if outcome.any_newly_acked() {
                    self.pto.on_newly_acked();
                    if let Some(sent) = outcome.sample_send_time() {
                        let sample = ctx.now - sent;
                        let confirmed = self.handshake_complete_at.is_some();
                        self.rtt.update(sample, ack_delay, confirmed);
                        let pto = self.base_pto(pkt.space);
                        ctx.record(
                            TraceEvent::new(ctx.now, Actor::Server, TraceKind::RttSample)
                                .with_space(pkt.space)
                                .with_detail("sample_us", sample as i64)
                                .with_detail("ack_delay_us", ack_delay as i64)
                                .with_detail("smoothed_us", self.rtt.smoothed_rtt() as i64)
                                .with_detail("pto_us", pto as i64),
                        );
                    }
                }
            }
            for frame in &pkt.frames {
                match frame {
                    Frame::Crypto {
                        role: CryptoRole::ClientHello,
                        ..
                    } => {
                        if self.client_hello_seen {
                            duplicate_client_hello = true;
                        } else {
                            self.client_hello_seen = true;
                            self.has_handshake_keys = true;
                            first_client_hello = true;
                        }
                    }
                    Frame::Crypto {
                        role: CryptoRole::Finished,
                        ..
                    } if self.handshake_complete_at.is_none() => {
                        self.handshake_complete_at = Some(ctx.now);
                        ctx.record(TraceEvent::new(ctx.now, Actor::Server, TraceKind::HandshakeComplete));
                    }
                    Frame::Stream {
                        stream_id: REQUEST_STREAM,
                        fin: true,
                        ..
                    } => {
                        if !self.request_received && self.handshake_complete_at.is_none() {
                            self.early_requests += 1;
                        }
                        self.request_received = true;
                    }
                    _ => {}
                }
            }
        }

        let mut out = self.release_withheld(ctx);
        if first_client_hello {
            if self.cfg.delta_t_us == 0 {
                out.extend(self.send_flight(ctx));
            } else {
                let at = ctx.now + self.cfg.delta_t_us;
                self.cert_timer = Some(ctx.timer(at, Actor::Server, TimerKind::CertReady)?);
            }
        }
        if duplicate_client_hello && self.flight_sent && !self.speedup_used {
            let groups = self.retransmit_crypto(ctx.now, true);
            if !groups.is_empty() {
                self.speedup_used = true;
                out.extend(self.send(ctx, groups, false));
            }
        }
        if self.request_received && self.handshake_complete_at.is_some() && !self.response_started {
            self.response_started = true;
            out.extend(self.send_response_chunk(ctx)?);
        }
        out.extend(self.flush_acks(ctx));
        self.set_timer(ctx)?;
        Ok(out)
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, kind: TimerKind) -> Result<Vec<Outgoing>> {
        if self.closed {
            return Ok(Vec::new());
        }
        let out = match kind {
            TimerKind::CertReady => {
                self.cert_timer = None;
                let mut out = self.send_flight(ctx);
                out.extend(self.flush_acks(ctx));
                out
            }
            TimerKind::Pto => self.on_pto(ctx),
            TimerKind::AppDataReady => {
                self.pacing_timer = None;
                self.send_response_chunk(ctx)?
            }
            TimerKind::Idle => {
                self.idle = None;
                self.close(ctx.sched);
                return Ok(Vec::new());
            }
            TimerKind::AckFlush | TimerKind::AppAck => Vec::new(),
        };
        self.set_timer(ctx)?;
        Ok(out)
    }

    /// ServerHello, certificate and Finished, split into datagrams.
    fn send_flight(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outgoing> {
        let sizes = self.cfg.flight_datagram_sizes();
        let last = sizes.len() - 1;
        let mut offset = 0;
        let mut groups = Vec::with_capacity(sizes.len());
        for (i, size) in sizes.into_iter().enumerate() {
            let mut packets = Vec::new();
            let mut room = size;
            if i == 0 {
                let mut frames = Vec::new();
                if self.spaces[0].ack_pending {
                    frames.push(self.take_ack(Space::Initial, ctx.now));
                }
                frames.push(Frame::Crypto {
                    role: CryptoRole::ServerHello,
                    offset: 0,
                    length: SERVER_HELLO_BYTES,
                });
                let mut init = self.space(Space::Initial).packet(Space::Initial, frames);
                init.pad_to(SERVER_INITIAL_PACKET);
                room = room.saturating_sub(init.size);
                packets.push(init);
            }
            let overhead = header_overhead(Space::Handshake) + CRYPTO_FRAME_HEADER;
            let length = room.saturating_sub(overhead).max(1);
            let role = if i == last {
                CryptoRole::Finished
            } else {
                CryptoRole::CertChain
            };
            packets.push(self.space(Space::Handshake).packet(
                Space::Handshake,
                vec![Frame::Crypto {
                    role,
                    offset,
                    length,
                }],
            ));
            offset += length;
            groups.push(packets);
        }
        self.flight_sent = true;
        let mut out = self.send(ctx, groups, false);
        if self.cfg.early_settings {
            let settings = self.space(Space::Application).packet(
                Space::Application,
                vec![Frame::Stream {
                    stream_id: CONTROL_STREAM,
                    offset: 0,
                    length: SETTINGS_BYTES,
                    fin: false,
                }],
            );
            out.extend(self.send(ctx, vec![vec![settings]], false));
        }
        out
    }

    fn take_ack(&mut self, space: Space, now: SimTime) -> Frame {
        let state = self.space(space);
        state.ack_pending = false;
        state.eliciting_since_ack = 0;
        state.ack_frame(now)
    }

    fn pending_ack_spaces(&self) -> Vec<Space> {
        Space::ALL
            .into_iter()
            .filter(|s| self.can_decrypt(*s) && self.spaces[s.index()].ack_pending)
            .collect()
    }

    fn flush_acks(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outgoing> {
        if !self.acks_allowed() {
            return Vec::new();
        }
        let spaces = self.pending_ack_spaces();
        if spaces.is_empty() {
            return Vec::new();
        }
        let packets = spaces
            .into_iter()
            .map(|s| {
                let f = self.take_ack(s, ctx.now);
                self.space(s).packet(s, vec![f])
            })
            .collect();
        let mut dg = Datagram::new(Actor::Server, packets);
        let iack = !self.flight_sent && dg.packets.iter().all(|p| p.space == Space::Initial);
        if iack && self.cfg.pad_iack {
            dg.pad_to(MIN_INITIAL_DATAGRAM);
        }
        self.send(ctx, vec![dg.packets], false)
    }

    /// Amplification gate. Datagrams over budget wait in FIFO order and get
    /// their index only when they actually leave.
    fn send(&mut self, ctx: &mut Ctx<'_>, groups: Vec<Vec<Packet>>, probe: bool) -> Vec<Outgoing> {
        for packets in groups {
            let dg = Datagram::new(Actor::Server, packets);
            if !self.blocked() && !self.amp.can_send(dg.size()) {
                ctx.record(
                    TraceEvent::new(ctx.now, Actor::Server, TraceKind::BudgetBlocked)
                        .with_detail("remaining", self.amp.remaining().unwrap_or(0) as i64)
                        .with_detail("needed", dg.size() as i64),
                );
            }
            self.withheld.push_back((dg, probe));
        }
        self.drain(ctx)
    }

    fn drain(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outgoing> {
        let mut out = Vec::new();
        while let Some((dg, _)) = self.withheld.front() {
            if !self.amp.can_send(dg.size()) {
                break;
            }
            let (mut dg, probe) = self.withheld.pop_front().expect("front exists");
            dg.index = self.next_index;
            self.next_index += 1;
            self.amp.bytes_sent += dg.size();
            for p in &dg.packets {
                self.spaces[p.space.index()].on_sent(p, ctx.now);
            }
            if probe {
                self.probes_sent += 1;
            }
            out.push(Outgoing { datagram: dg, probe });
        }
        out
    }

    fn release_withheld(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outgoing> {
        if !self.blocked() {
            return Vec::new();
        }
        let out = self.drain(ctx);
        if !out.is_empty() && !self.blocked() {
            ctx.record(TraceEvent::new(ctx.now, Actor::Server, TraceKind::BudgetUnblocked));
        }
        out
    }

    fn send_response_chunk(&mut self, ctx: &mut Ctx<'_>) -> Result<Vec<Outgoing>> {
        let remaining = self.cfg.response_bytes.saturating_sub(self.response_offset);
        let mut packets = Vec::new();
        if self.spaces[1].ack_pending && self.can_decrypt(Space::Handshake) {
            let f = self.take_ack(Space::Handshake, ctx.now);
            packets.push(self.space(Space::Handshake).packet(Space::Handshake, vec![f]));
        }
        let mut frames = Vec::new();
        if self.spaces[2].ack_pending {
            frames.push(self.take_ack(Space::Application, ctx.now));
        }
        let used: u64 = packets.iter().map(|p| p.size).sum::<u64>()
            + header_overhead(Space::Application)
            + STREAM_FRAME_HEADER
            + if frames.is_empty() { 0 } else { ACK_FRAME_BYTES };
        let length = remaining.min(self.cfg.max_datagram_size.saturating_sub(used).max(1));
        let fin = length == remaining;
        frames.push(Frame::Stream {
            stream_id: REQUEST_STREAM,
            offset: self.response_offset,
            length,
            fin,
        });
        self.response_offset += length;
        packets.push(self.space(Space::Application).packet(Space::Application, frames));
        let out = self.send(ctx, vec![packets], false);
        if !fin {
            let size: u64 = out.iter().map(|o| o.datagram.size()).sum();
            let gap = serialization_us(size, self.cfg.pacing_bits_per_s);
            self.pacing_timer = Some(ctx.timer(ctx.now + gap, Actor::Server, TimerKind::AppDataReady)?);
        }
        Ok(out)
    }

    /// Fresh packets carrying outstanding Initial and Handshake data. With
    /// `only_older`, packets sent at the current instant are left alone.
    fn retransmit_crypto(&mut self, now: SimTime, only_older: bool) -> Vec<Vec<Packet>> {
        let mut packets = Vec::new();
        for space in [Space::Initial, Space::Handshake] {
            let state = &mut self.spaces[space.index()];
            if state.discarded {
                continue;
            }
            if only_older && !state.sent.values().any(|p| p.has_data() && p.time < now) {
                continue;
            }
            for (_, old) in state.take_outstanding(true) {
                let frames: Vec<Frame> = old
                    .frames
                    .into_iter()
                    .filter(|f| !matches!(f, Frame::Ping))
                    .collect();
                let mut pkt = self.space(space).packet(space, frames);
                if space == Space::Initial {
                    pkt.pad_to(SERVER_INITIAL_PACKET);
                }
                packets.push(pkt);
            }
        }
        pack(packets, self.cfg.max_datagram_size)
    }

    fn on_pto(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outgoing> {
        let space = self.pto.space();
        ctx.record(
            TraceEvent::new(ctx.now, Actor::Server, TraceKind::PtoExpired)
                .with_space(space)
                .with_detail("backoff", self.pto.backoff_exponent() as i64),
        );
        let has_tail = self
            .spaces
            .iter()
            .any(|s| !s.discarded && s.sent.values().any(|p| p.eliciting && p.has_data()));
        let directive = self.pto.on_expired(has_tail, self.cfg.probe_count);
        let crypto = self.retransmit_crypto(ctx.now, false);
        let groups = if !crypto.is_empty() {
            crypto
        } else if has_tail {
            let oldest: Vec<_> = self.spaces[2]
                .take_outstanding(true)
                .into_iter()
                .take(directive.datagrams as usize)
                .collect();
            let mut packets = Vec::new();
            for (_, old) in oldest {
                packets.push(self.space(Space::Application).packet(Space::Application, old.frames));
            }
            pack(packets, self.cfg.max_datagram_size)
        } else {
            let s = directive.space;
            vec![vec![self.space(s).packet(s, vec![Frame::Ping])]]
        };
        self.send(ctx, groups, true)
    }

    fn base_pto(&self, space: Space) -> u64 {
        self.rtt.pto_duration(
            space,
            self.handshake_complete_at.is_some(),
            self.cfg.default_pto_us,
            GRANULARITY_US,
        )
    }

    /// No timer while blocked by the amplification limit; otherwise the
    /// earliest per-space deadline from the last ack-eliciting send.
    fn set_timer(&mut self, ctx: &mut Ctx<'_>) -> Result<()> {
        if self.closed || self.blocked() {
            self.pto.disarm(ctx.sched);
            return Ok(());
        }
        let confirmed = self.handshake_complete_at.is_some();
        let mut best: Option<(SimTime, Space, SimTime)> = None;
        for space in Space::ALL {
            let state = &self.spaces[space.index()];
            if !state.eliciting_in_flight() || (space == Space::Application && !confirmed) {
                continue;
            }
            let from = state.last_eliciting_sent.expect("in flight implies a send");
            let at = from + self.pto.effective(self.base_pto(space));
            if best.is_none_or(|(t, _, _)| at < t) {
                best = Some((at, space, from));
            }
        }
        let Some((_, space, from)) = best else {
            self.pto.disarm(ctx.sched);
            return Ok(());
        };
        if self.pto.timer().is_some_and(|h| ctx.sched.is_pending(h)) && self.pto.space() == space {
            // unchanged deadline: keep the existing timer so FIFO order holds
            let base = self.base_pto(space);
            let at = (from + self.pto.effective(base)).max(ctx.now);
            if self.armed_at == Some(at) {
                return Ok(());
            }
        }
        self.pto.set_space(space);
        let base = self.base_pto(space);
        let (_, at) = self.pto.arm(
            ctx.sched,
            base,
            from,
            Event::Timer {
                actor: Actor::Server,
                kind: TimerKind::Pto,
            },
        )?;
        self.armed_at = Some(at);
        ctx.record(
            TraceEvent::new(ctx.now, Actor::Server, TraceKind::PtoArmed)
                .with_space(space)
                .with_detail("pto_us", self.pto.effective(base) as i64)
                .with_detail("fire_us", at.as_micros() as i64),
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flight_sizes() {
        let small = ServerConfig::default();
        assert_eq!(small.flight_datagram_sizes(), vec![1252, 360]);
        let large = ServerConfig {
            cert_bytes: 5113,
            ..ServerConfig::default()
        };
        assert_eq!(large.flight_datagram_sizes(), vec![1252, 1252, 1252, 1252, 505]);
    }

    #[test]
    fn zero_delay_iack_acts_like_wfc() {
        let cfg = ServerConfig::default();
        assert_eq!(cfg.effective_mode(), ServerMode::Wfc);
        let cfg = ServerConfig {
            delta_t_us: 1,
            ..cfg
        };
        assert_eq!(cfg.effective_mode(), ServerMode::Iack);
    }
}
