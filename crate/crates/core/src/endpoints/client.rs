use std::collections::BTreeMap;

use crate::profiles::{apply_quirk, BehaviorOverride, ImplementationProfile, QuirkEvent};
use crate::recovery::{ProbeKind, PtoState, RttEstimator, Space, DEFAULT_MAX_ACK_DELAY_US, GRANULARITY_US};
use crate::sim::{EventHandle, Scheduler, SimError, SimTime};
use crate::traces::{TraceEvent, TraceKind};

use super::wire::{Actor, CryptoRole, Datagram, Frame, Packet};
use super::{
    cancel_slot, pack, Ctx, Event, Outgoing, SpaceState, TimerKind, CLIENT_FINISHED_BYTES, CLIENT_HELLO_BYTES,
    HANDSHAKE_ACK_DELAY_US, IDLE_TIMEOUT_US, MIN_INITIAL_DATAGRAM, REQUEST_BYTES, REQUEST_STREAM,
};

/// Application ACKs are sent immediately after this many eliciting packets.
const APP_ACK_EVERY: u32 = 2;

type Result<T> = std::result::Result<T, SimError>;

/// Byte ranges of a stream received so far, keyed by offset.
#[derive(Debug, Default)]
struct StreamAssembly {
    chunks: BTreeMap<u64, u64>,
    end: Option<u64>,
}

impl StreamAssembly {
    fn insert(&mut self, offset: u64, length: u64, fin: bool) {
        self.chunks.entry(offset).or_insert(length);
        if fin {
            self.end = Some(offset + length);
        }
    }

    fn contiguous(&self) -> u64 {
        let mut upto = 0;
        for (&off, &len) in &self.chunks {
            if off > upto {
                break;
            }
            upto = upto.max(off + len);
        }
        upto
    }

    fn complete(&self) -> bool {
        self.end.is_some_and(|end| self.contiguous() >= end)
    }
}

#[derive(Debug)]
pub struct Client {
    profile: ImplementationProfile,
    max_datagram: u64,
    rtt: RttEstimator,
    pto: PtoState,
    spaces: [SpaceState; 3],
    next_index: u32,
    has_handshake_keys: bool,
    has_app_keys: bool,
    confirmed: bool,
    peer_validated: bool,
    second_flight_sent: bool,
    server_flight: StreamAssembly,
    response: StreamAssembly,
    ack_flush: Option<EventHandle>,
    app_ack: Option<EventHandle>,
    idle: Option<EventHandle>,
    quirk_drop_used: bool,
    closed: bool,
    server_hello_at: Option<SimTime>,
    handshake_complete_at: Option<SimTime>,
    first_app_byte_at: Option<SimTime>,
    response_complete_at: Option<SimTime>,
    first_pto_us: Option<u64>,
    probes_sent: u32,
}

impl Client {
    pub fn new(profile: ImplementationProfile, max_datagram: u64) -> Self {
        Client {
            profile,
            max_datagram,
            rtt: RttEstimator::new(DEFAULT_MAX_ACK_DELAY_US),
            pto: PtoState::new(Space::Initial),
            spaces: Default::default(),
            next_index: 1,
            has_handshake_keys: false,
            has_app_keys: false,
            confirmed: false,
            peer_validated: false,
            second_flight_sent: false,
            server_flight: StreamAssembly::default(),
            response: StreamAssembly::default(),
            ack_flush: None,
            app_ack: None,
            idle: None,
            quirk_drop_used: false,
            closed: false,
            server_hello_at: None,
            handshake_complete_at: None,
            first_app_byte_at: None,
            response_complete_at: None,
            first_pto_us: None,
            probes_sent: 0,
        }
    }

    pub fn profile(&self) -> &ImplementationProfile {
        &self.profile
    }

    pub fn rtt(&self) -> &RttEstimator {
        &self.rtt
    }

    pub fn server_hello_at(&self) -> Option<SimTime> {
        self.server_hello_at
    }

    pub fn handshake_complete_at(&self) -> Option<SimTime> {
        self.handshake_complete_at
    }

    pub fn first_app_byte_at(&self) -> Option<SimTime> {
        self.first_app_byte_at
    }

    pub fn response_complete_at(&self) -> Option<SimTime> {
        self.response_complete_at
    }

    /// Base PTO right after the first RTT sample was processed.
    pub fn first_pto_us(&self) -> Option<u64> {
        self.first_pto_us
    }

    pub fn probes_sent(&self) -> u32 {
        self.probes_sent
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self, sched: &mut Scheduler<Event>) {
        self.closed = true;
        self.pto.disarm(sched);
        cancel_slot(sched, &mut self.ack_flush);
        cancel_slot(sched, &mut self.app_ack);
        cancel_slot(sched, &mut self.idle);
    }

    fn space(&mut self, space: Space) -> &mut SpaceState {
        &mut self.spaces[space.index()]
    }

    fn can_decrypt(&self, space: Space) -> bool {
        match space {
            Space::Initial => !self.spaces[0].discarded,
            Space::Handshake => self.has_handshake_keys,
            Space::Application => self.has_app_keys,
        }
    }

    fn rearm_idle(&mut self, ctx: &mut Ctx<'_>) -> Result<()> {
        cancel_slot(ctx.sched, &mut self.idle);
        self.idle = Some(ctx.timer(ctx.now + IDLE_TIMEOUT_US, Actor::Client, TimerKind::Idle)?);
        Ok(())
    }

    /// Sends the ClientHello.
    pub fn start(&mut self, ctx: &mut Ctx<'_>) -> Result<Vec<Outgoing>> {
        self.rearm_idle(ctx)?;
        let ch = self.client_hello_packet();
        let out = self.emit(ctx, vec![vec![ch]], false);
        self.set_timer(ctx, false)?;
        Ok(out)
    }

    fn client_hello_packet(&mut self) -> Packet {
        self.space(Space::Initial).packet(
            Space::Initial,
            vec![Frame::Crypto {
                role: CryptoRole::ClientHello,
                offset: 0,
                length: CLIENT_HELLO_BYTES,
            }],
        )
    }

    /// Turns packet groups into indexed datagrams and records them as sent.
    fn emit(&mut self, ctx: &mut Ctx<'_>, groups: Vec<Vec<Packet>>, probe: bool) -> Vec<Outgoing> {
        let mut out = Vec::with_capacity(groups.len());
        for packets in groups {
            let mut dg = Datagram::new(Actor::Client, packets);
            let eliciting_initial = dg
                .packets
                .iter()
                .any(|p| p.space == Space::Initial && p.is_ack_eliciting());
            if eliciting_initial {
                dg.pad_to(MIN_INITIAL_DATAGRAM);
            }
            dg.index = self.next_index;
            self.next_index += 1;
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

    pub fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dg: &Datagram) -> Result<Vec<Outgoing>> {
        if self.closed {
            return Ok(Vec::new());
        }
        self.rearm_idle(ctx)?;

        let acks_outstanding_ping = dg.packets.iter().any(|p| {
            self.can_decrypt(p.space)
                && p.ack().is_some_and(|(acked, _)| {
                    self.spaces[p.space.index()]
                        .sent
                        .iter()
                        .any(|(pn, sp)| sp.has_ping() && acked.contains(*pn))
                })
        });
        let quirk = apply_quirk(
            &self.profile,
            QuirkEvent::Reception {
                packets: dg.packets.len(),
                acks_outstanding_ping,
            },
        );
        if quirk == BehaviorOverride::DropDatagram && !self.quirk_drop_used {
            self.quirk_drop_used = true;
            ctx.record(
                TraceEvent::new(ctx.now, Actor::Client, TraceKind::Drop)
                    .with_datagram(dg)
                    .with_detail("quirk", 1),
            );
            return Ok(Vec::new());
        }

        let had_in_flight = self.eliciting_in_flight();
        let mut newly_acked = false;
        for pkt in &dg.packets {
            if !self.can_decrypt(pkt.space) {
                continue;
            }
            let idx = pkt.space.index();
            self.spaces[idx].on_received(pkt, ctx.now);
            if let Some((acked, ack_delay)) = pkt.ack() {
                let outcome = self.spaces[idx].process_ack(acked);
                if outcome.any_newly_acked() {
                    newly_acked = true;
                    self.pto.on_newly_acked();
                    if pkt.space == Space::Handshake {
                        self.peer_validated = true;
                    }
                    if let Some(sent) = outcome.sample_send_time() {
                        self.on_rtt_sample(ctx, pkt.space, ctx.now - sent, ack_delay);
                    }
                }
            }
            for frame in &pkt.frames {
                self.on_frame(ctx, pkt.space, frame);
            }
        }

        let mut out = Vec::new();
        if !self.second_flight_sent && self.has_handshake_keys && self.server_flight.complete() {
            out.extend(self.second_flight(ctx)?);
        }
        self.schedule_acks(ctx, &mut out)?;

        if self.response_complete_at.is_none() && self.response.complete() {
            self.response_complete_at = Some(ctx.now);
        }
        let ack_only_emptied = had_in_flight && !self.eliciting_in_flight() && !dg.is_ack_eliciting();
        if newly_acked || out.iter().any(|o| o.datagram.is_ack_eliciting()) {
            self.set_timer(ctx, ack_only_emptied)?;
        }
        Ok(out)
    }

    fn on_frame(&mut self, ctx: &mut Ctx<'_>, space: Space, frame: &Frame) {
        match *frame {
            Frame::Crypto {
                role: CryptoRole::ServerHello,
                ..
            } => {
                self.has_handshake_keys = true;
                self.server_hello_at.get_or_insert(ctx.now);
            }
            Frame::Crypto {
                role: role @ (CryptoRole::CertChain | CryptoRole::Finished),
                offset,
                length,
            } if space == Space::Handshake => {
                self.server_flight
                    .insert(offset, length, role == CryptoRole::Finished);
                if self.server_flight.complete() {
                    self.has_app_keys = true;
                }
            }
            Frame::Stream {
                stream_id,
                offset,
                length,
                fin,
            } if space == Space::Application => {
                if self.first_app_byte_at.is_none() {
                    self.first_app_byte_at = Some(ctx.now);
                    ctx.record(
                        TraceEvent::new(ctx.now, Actor::Client, TraceKind::FirstAppByte)
                            .with_space(Space::Application)
                            .with_detail("stream_id", stream_id as i64),
                    );
                }
                if stream_id == REQUEST_STREAM {
                    self.response.insert(offset, length, fin);
                }
            }
            _ => {}
        }
    }

    fn on_rtt_sample(&mut self, ctx: &mut Ctx<'_>, space: Space, sample: u64, ack_delay: u64) {
        let first = !self.rtt.has_sample();
        let mut ev = TraceEvent::new(ctx.now, Actor::Client, TraceKind::RttSample)
            .with_space(space)
            .with_detail("sample_us", sample as i64)
            .with_detail("ack_delay_us", ack_delay as i64);
        match apply_quirk(&self.profile, QuirkEvent::RttSample { space, first }) {
            BehaviorOverride::DiscardSample => {
                ev = ev.with_detail("discarded", 1);
            }
            BehaviorOverride::MisinitializeSmoothed(smoothed) => {
                self.rtt.update(sample, ack_delay, self.confirmed);
                self.rtt.override_smoothed(smoothed);
            }
            _ => self.rtt.update(sample, ack_delay, self.confirmed),
        }
        let pto = self.base_pto(Space::Initial);
        self.first_pto_us.get_or_insert(pto);
        ctx.record(
            ev.with_detail("smoothed_us", self.rtt.smoothed_rtt() as i64)
                .with_detail("pto_us", pto as i64),
        );
    }

    fn base_pto(&self, space: Space) -> u64 {
        self.rtt
            .pto_duration(space, self.confirmed, self.profile.default_pto_us, GRANULARITY_US)
    }

    fn eliciting_in_flight(&self) -> bool {
        self.spaces.iter().any(SpaceState::eliciting_in_flight)
    }

    /// Finished plus request, split across datagrams the way the profile does.
    fn second_flight(&mut self, ctx: &mut Ctx<'_>) -> Result<Vec<Outgoing>> {
        cancel_slot(ctx.sched, &mut self.ack_flush);
        let now = ctx.now;
        let init_ack = self.spaces[0].ack_frame(now);
        let init = self.space(Space::Initial).packet(Space::Initial, vec![init_ack]);
        let hs_ack = self.spaces[1].ack_frame(now);
        let hs = self.space(Space::Handshake).packet(
            Space::Handshake,
            vec![
                hs_ack,
                Frame::Crypto {
                    role: CryptoRole::Finished,
                    offset: 0,
                    length: CLIENT_FINISHED_BYTES,
                },
            ],
        );
        let n = self.profile.second_flight_len().clamp(1, 4);
        let mut app_frames = Vec::new();
        if self.spaces[2].ack_pending {
            app_frames.push(self.spaces[2].ack_frame(now));
        }
        let request = |offset, length, fin| Frame::Stream {
            stream_id: REQUEST_STREAM,
            offset,
            length,
            fin,
        };
        let groups = if n == 4 {
            let half = REQUEST_BYTES / 2;
            app_frames.push(request(0, half, false));
            let app1 = self.space(Space::Application).packet(Space::Application, app_frames);
            let app2 = self.space(Space::Application).packet(
                Space::Application,
                vec![request(half, REQUEST_BYTES - half, true)],
            );
            vec![vec![init], vec![hs], vec![app1], vec![app2]]
        } else {
            app_frames.push(request(0, REQUEST_BYTES, true));
            let app = self.space(Space::Application).packet(Space::Application, app_frames);
            match n {
                1 => vec![vec![init, hs, app]],
                2 => vec![vec![init, hs], vec![app]],
                _ => vec![vec![init], vec![hs], vec![app]],
            }
        };
        let out = self.emit(ctx, groups, false);
        self.second_flight_sent = true;
        self.confirmed = true;
        self.handshake_complete_at = Some(now);
        self.spaces[0].discard();
        ctx.record(TraceEvent::new(now, Actor::Client, TraceKind::HandshakeComplete));
        Ok(out)
    }

    fn schedule_acks(&mut self, ctx: &mut Ctx<'_>, out: &mut Vec<Outgoing>) -> Result<()> {
        let hs_pending = [Space::Initial, Space::Handshake]
            .into_iter()
            .any(|s| self.can_decrypt(s) && self.spaces[s.index()].ack_pending);
        if hs_pending && self.ack_flush.is_none() {
            self.ack_flush = Some(ctx.timer(
                ctx.now + HANDSHAKE_ACK_DELAY_US,
                Actor::Client,
                TimerKind::AckFlush,
            )?);
        }
        let app = &self.spaces[2];
        if self.has_app_keys && app.ack_pending {
            if app.eliciting_since_ack >= APP_ACK_EVERY {
                cancel_slot(ctx.sched, &mut self.app_ack);
                let frame = self.spaces[2].ack_frame(ctx.now);
                let pkt = self.space(Space::Application).packet(Space::Application, vec![frame]);
                out.extend(self.emit(ctx, vec![vec![pkt]], false));
            } else if self.app_ack.is_none() {
                self.app_ack = Some(ctx.timer(
                    ctx.now + DEFAULT_MAX_ACK_DELAY_US,
                    Actor::Client,
                    TimerKind::AppAck,
                )?);
            }
        }
        Ok(())
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, kind: TimerKind) -> Result<Vec<Outgoing>> {
        if self.closed {
            return Ok(Vec::new());
        }
        match kind {
            TimerKind::Pto => self.on_pto(ctx),
            TimerKind::AckFlush => {
                self.ack_flush = None;
                let mut packets = Vec::new();
                for space in [Space::Initial, Space::Handshake] {
                    if self.can_decrypt(space) && self.spaces[space.index()].ack_pending {
                        let frame = self.spaces[space.index()].ack_frame(ctx.now);
                        packets.push(self.space(space).packet(space, vec![frame]));
                    }
                }
                if packets.is_empty() {
                    return Ok(Vec::new());
                }
                Ok(self.emit(ctx, vec![packets], false))
            }
            TimerKind::AppAck => {
                self.app_ack = None;
                if !self.spaces[2].ack_pending {
                    return Ok(Vec::new());
                }
                let frame = self.spaces[2].ack_frame(ctx.now);
                let pkt = self.space(Space::Application).packet(Space::Application, vec![frame]);
                Ok(self.emit(ctx, vec![vec![pkt]], false))
            }
            TimerKind::Idle => {
                self.idle = None;
                self.close(ctx.sched);
                Ok(Vec::new())
            }
            TimerKind::CertReady | TimerKind::AppDataReady => Ok(Vec::new()),
        }
    }

    fn on_pto(&mut self, ctx: &mut Ctx<'_>) -> Result<Vec<Outgoing>> {
        let space = self.pto.space();
        ctx.record(
            TraceEvent::new(ctx.now, Actor::Client, TraceKind::PtoExpired)
                .with_space(space)
                .with_detail("backoff", self.pto.backoff_exponent() as i64),
        );
        let has_tail = self
            .spaces
            .iter()
            .any(|s| !s.discarded && s.sent.values().any(|p| p.eliciting && p.has_data()));
        let directive = self.pto.on_expired(has_tail, self.profile.probe_count);
        let mut groups = match directive.kind {
            ProbeKind::RetransmitTail => self.retransmit_tail(ctx.now),
            ProbeKind::Ping => {
                let probe_space = if self.has_handshake_keys && !self.confirmed {
                    Space::Handshake
                } else if self.confirmed {
                    Space::Application
                } else {
                    Space::Initial
                };
                let ov = apply_quirk(&self.profile, QuirkEvent::PingProbe { space: probe_space });
                let pkt = if ov == BehaviorOverride::RetransmitClientHello {
                    self.client_hello_packet()
                } else {
                    self.space(probe_space).packet(probe_space, vec![Frame::Ping])
                };
                vec![vec![pkt]]
            }
        };
        while groups.len() < directive.datagrams as usize {
            let s = groups[0][0].space;
            groups.push(vec![self.space(s).packet(s, vec![Frame::Ping])]);
        }
        let out = self.emit(ctx, groups, true);
        self.set_timer(ctx, false)?;
        Ok(out)
    }

    /// Moves all outstanding data into fresh packets, with current ACKs.
    fn retransmit_tail(&mut self, now: SimTime) -> Vec<Vec<Packet>> {
        let mut packets = Vec::new();
        for space in Space::ALL {
            if self.spaces[space.index()].discarded {
                continue;
            }
            let old = self.spaces[space.index()].take_outstanding(false);
            let mut frames: Vec<Frame> = old
                .into_iter()
                .flat_map(|(_, p)| p.frames)
                .filter(|f| !matches!(f, Frame::Ping))
                .collect();
            if frames.is_empty() {
                continue;
            }
            let state = &self.spaces[space.index()];
            if space != Space::Initial && !state.received.is_empty() {
                frames.insert(0, state.ack_frame(now));
            }
            packets.push(self.space(space).packet(space, frames));
        }
        pack(packets, self.max_datagram)
    }

    /// Loss-detection timer: earliest per-space deadline from the last
    /// ack-eliciting send, or an anti-deadlock timer from now.
    fn set_timer(&mut self, ctx: &mut Ctx<'_>, ack_only_emptied: bool) -> Result<()> {
        if self.closed || self.response_complete_at.is_some() {
            self.pto.disarm(ctx.sched);
            return Ok(());
        }
        if !self.eliciting_in_flight() {
            if self.peer_validated || self.confirmed {
                self.pto.disarm(ctx.sched);
                return Ok(());
            }
            if ack_only_emptied
                && apply_quirk(&self.profile, QuirkEvent::ProbeAfterAckOnly)
                    == BehaviorOverride::SuppressProbe
            {
                self.pto.disarm(ctx.sched);
                return Ok(());
            }
            let space = if self.has_handshake_keys {
                Space::Handshake
            } else {
                Space::Initial
            };
            return self.arm(ctx, space, ctx.now);
        }
        let mut best: Option<(SimTime, Space, SimTime)> = None;
        for space in Space::ALL {
            let state = &self.spaces[space.index()];
            if !state.eliciting_in_flight() || (space == Space::Application && !self.confirmed) {
                continue;
            }
            let from = state.last_eliciting_sent.expect("in flight implies a send");
            let at = from + self.pto.effective(self.base_pto(space));
            if best.is_none_or(|(t, _, _)| at < t) {
                best = Some((at, space, from));
            }
        }
        match best {
            Some((_, space, from)) => self.arm(ctx, space, from),
            None => {
                self.pto.disarm(ctx.sched);
                Ok(())
            }
        }
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>, space: Space, from: SimTime) -> Result<()> {
        self.pto.set_space(space);
        let base = self.base_pto(space);
        let (_, at) = self.pto.arm(
            ctx.sched,
            base,
            from,
            Event::Timer {
                actor: Actor::Client,
                kind: TimerKind::Pto,
            },
        )?;
        ctx.record(
            TraceEvent::new(ctx.now, Actor::Client, TraceKind::PtoArmed)
                .with_space(space)
                .with_detail("pto_us", self.pto.effective(base) as i64)
                .with_detail("fire_us", at.as_micros() as i64),
        );
        Ok(())
    }
}
