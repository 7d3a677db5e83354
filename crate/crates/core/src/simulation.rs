//! One client, one server, one link: runs a single handshake plus request to
//! completion and returns the trace with derived metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoints::wire::{Actor, FrameKind};
use crate::endpoints::{Client, Ctx, Event, Outgoing, Server, ServerConfig, ServerMode};
use crate::netem::{Link, LinkConfig, LossConfigError, LossRule, TransmitOutcome, DEFAULT_BANDWIDTH_BPS};
use crate::profiles::{lookup, ImplementationProfile};
use crate::sim::{RunStatus, Scheduler, SimError, SimTime, DEFAULT_LIMIT};
use crate::traces::{TraceEvent, TraceKind};

pub const SMALL_CERT_BYTES: u64 = 1212;
pub const LARGE_CERT_BYTES: u64 = 5113;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Timeline(#[from] SimError),
    #[error(transparent)]
    Loss(#[from] LossConfigError),
    #[error("rtt must be positive")]
    ZeroRtt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rtt_us: u64,
    pub delta_t_us: u64,
    /// Zero disables serialization delay.
    pub bandwidth_bits_per_s: u64,
    pub cert_bytes: u64,
    pub mode: ServerMode,
    pub profile: ImplementationProfile,
    pub loss: Vec<LossRule>,
    pub pad_iack: bool,
    pub early_settings: bool,
    /// Fixed receive-path processing delay at each endpoint.
    pub stack_delay_us: u64,
    /// Upper bound of additional uniform per-datagram delay.
    pub stack_jitter_us: u64,
    pub seed: u64,
    pub response_bytes: u64,
    pub server_default_pto_us: u64,
    pub max_datagram_size: u64,
    pub limit_us: u64,
}

impl RunConfig {
    pub fn new(rtt_us: u64, delta_t_us: u64, mode: ServerMode, profile: ImplementationProfile) -> Self {
        RunConfig {
            rtt_us,
            delta_t_us,
            bandwidth_bits_per_s: DEFAULT_BANDWIDTH_BPS,
            cert_bytes: SMALL_CERT_BYTES,
            mode,
            profile,
            loss: Vec::new(),
            pad_iack: false,
            early_settings: false,
            stack_delay_us: 0,
            stack_jitter_us: 0,
            seed: 0,
            response_bytes: crate::endpoints::DEFAULT_RESPONSE_BYTES,
            server_default_pto_us: 200_000,
            max_datagram_size: crate::endpoints::DEFAULT_MAX_DATAGRAM,
            limit_us: DEFAULT_LIMIT.as_micros(),
        }
    }

    /// Convenience constructor for a built-in profile.
    ///
    /// # Panics
    ///
    /// Panics if `profile` is not a built-in name.
    pub fn builtin(rtt_us: u64, delta_t_us: u64, mode: ServerMode, profile: &str) -> Self {
        Self::new(rtt_us, delta_t_us, mode, lookup(profile).expect("built-in profile"))
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            mode: self.mode,
            delta_t_us: self.delta_t_us,
            cert_bytes: self.cert_bytes,
            pad_iack: self.pad_iack,
            default_pto_us: self.server_default_pto_us,
            early_settings: self.early_settings,
            response_bytes: self.response_bytes,
            max_datagram_size: self.max_datagram_size,
            pacing_bits_per_s: self.bandwidth_bits_per_s,
            probe_count: 1,
        }
    }

    pub fn link_config(&self) -> LinkConfig {
        LinkConfig::symmetric(self.rtt_us, self.bandwidth_bits_per_s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub status: RunStatus,
    pub final_time: SimTime,
    pub dispatched: u64,
    pub trace: Vec<TraceEvent>,
    /// First client emission to first application byte at the client.
    pub ttfb_us: Option<u64>,
    pub client_handshake_complete_us: Option<u64>,
    pub server_handshake_complete_us: Option<u64>,
    pub server_hello_arrival_us: Option<u64>,
    pub response_complete_us: Option<u64>,
    /// Client base PTO right after its first RTT sample.
    pub first_pto_us: Option<u64>,
    pub probes_sent: u32,
    pub server_probes_sent: u32,
    pub spurious_retransmits: u32,
    pub early_requests: u32,
    pub link_drops: u32,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.response_complete_us.is_some()
    }
}

struct World {
    client: Client,
    server: Server,
    link: Link,
    trace: Vec<TraceEvent>,
    rng: ChaCha8Rng,
    stack_delay_us: u64,
    stack_jitter_us: u64,
    last_processing: [SimTime; 2],
    done: bool,
}

fn slot(actor: Actor) -> usize {
    match actor {
        Actor::Client => 0,
        _ => 1,
    }
}

impl World {
    fn handle(&mut self, sched: &mut Scheduler<Event>, now: SimTime, ev: Event) -> Result<(), SimError> {
        let (sender, out) = match ev {
            Event::Start => {
                let mut ctx = Ctx {
                    now,
                    sched,
                    trace: &mut self.trace,
                };
                (Actor::Client, self.client.start(&mut ctx)?)
            }
            Event::Deliver { to, datagram } => {
                let mut rec = TraceEvent::new(now, to, TraceKind::Receive).with_datagram(&datagram);
                if let Some(d) = datagram.first_ack_delay() {
                    rec = rec.with_detail("ack_delay_us", d as i64);
                }
                self.trace.push(rec);
                if self.done {
                    return Ok(());
                }
                let mut ctx = Ctx {
                    now,
                    sched,
                    trace: &mut self.trace,
                };
                let out = match to {
                    Actor::Client => self.client.on_datagram(&mut ctx, &datagram)?,
                    _ => self.server.on_datagram(&mut ctx, &datagram)?,
                };
                (to, out)
            }
            Event::Timer { actor, kind } => {
                let mut ctx = Ctx {
                    now,
                    sched,
                    trace: &mut self.trace,
                };
                let out = match actor {
                    Actor::Client => self.client.on_timer(&mut ctx, kind)?,
                    _ => self.server.on_timer(&mut ctx, kind)?,
                };
                (actor, out)
            }
        };
        self.transmit(sched, now, sender, out)?;
        if !self.done && self.client.response_complete_at().is_some() {
            self.done = true;
            self.client.close(sched);
            self.server.close(sched);
        }
        Ok(())
    }

    fn transmit(
        &mut self,
        sched: &mut Scheduler<Event>,
        now: SimTime,
        sender: Actor,
        out: Vec<Outgoing>,
    ) -> Result<(), SimError> {
        for Outgoing { datagram, probe } in out {
            let mut ev = TraceEvent::new(now, sender, TraceKind::Emit).with_datagram(&datagram);
            if probe {
                ev = ev.with_detail("probe", 1);
            }
            if let Some(d) = datagram.first_ack_delay() {
                ev = ev.with_detail("ack_delay_us", d as i64);
            }
            self.trace.push(ev);
            match self.link.transmit(&datagram, now) {
                TransmitOutcome::Dropped => {
                    self.trace
                        .push(TraceEvent::new(now, Actor::Link, TraceKind::Drop).with_datagram(&datagram));
                }
                TransmitOutcome::Delivered { at } => {
                    let to = sender.peer();
                    let jitter = if self.stack_jitter_us > 0 {
                        self.rng.random_range(0..=self.stack_jitter_us)
                    } else {
                        0
                    };
                    let mut process_at = at + self.stack_delay_us + jitter;
                    let last = &mut self.last_processing[slot(to)];
                    process_at = process_at.max(*last);
                    *last = process_at;
                    sched.schedule(process_at, Event::Deliver { to, datagram })?;
                }
            }
        }
        Ok(())
    }
}

/// Client probes emitted before the first ServerHello reached the client
/// while no datagram had been lost yet.
pub fn count_spurious_probes(trace: &[TraceEvent]) -> u32 {
    let mut count = 0;
    for e in trace {
        match (e.kind, e.actor) {
            (TraceKind::Drop, _) => break,
            (TraceKind::Receive, Actor::Client) if e.has_frame(FrameKind::CryptoServerHello) => break,
            (TraceKind::Emit, Actor::Client) if e.detail_value("probe") == Some(1) => count += 1,
            _ => {}
        }
    }
    count
}

pub fn simulate(cfg: &RunConfig) -> Result<RunResult, SimulationError> {
    if cfg.rtt_us == 0 {
        return Err(SimulationError::ZeroRtt);
    }
    let server_cfg = cfg.server_config();
    let mode = server_cfg.effective_mode();
    let rules = cfg
        .loss
        .iter()
        .map(|r| r.resolve(&cfg.profile, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let mut world = World {
        client: Client::new(cfg.profile.clone(), cfg.max_datagram_size),
        server: Server::new(server_cfg),
        link: Link::new(cfg.link_config(), rules),
        trace: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        stack_delay_us: cfg.stack_delay_us,
        stack_jitter_us: cfg.stack_jitter_us,
        last_processing: [SimTime::ZERO; 2],
        done: false,
    };
    let mut sched = Scheduler::new();
    sched.schedule(SimTime::ZERO, Event::Start)?;
    let report = sched.run_until_quiescent(SimTime(cfg.limit_us), |s, now, ev| world.handle(s, now, ev))?;

    let start = world
        .trace
        .iter()
        .find(|e| e.kind == TraceKind::Emit && e.actor == Actor::Client)
        .map_or(SimTime::ZERO, |e| e.time_us);
    let rel = |t: Option<SimTime>| t.map(|t| t.since(start));
    let spurious = count_spurious_probes(&world.trace);
    let link_drops = world
        .trace
        .iter()
        .filter(|e| e.kind == TraceKind::Drop && e.actor == Actor::Link)
        .count() as u32;
    Ok(RunResult {
        status: report.status,
        final_time: report.final_time,
        dispatched: report.dispatched,
        ttfb_us: rel(world.client.first_app_byte_at()),
        client_handshake_complete_us: rel(world.client.handshake_complete_at()),
        server_handshake_complete_us: rel(world.server.handshake_complete_at()),
        server_hello_arrival_us: rel(world.client.server_hello_at()),
        response_complete_us: rel(world.client.response_complete_at()),
        first_pto_us: world.client.first_pto_us(),
        probes_sent: world.client.probes_sent(),
        server_probes_sent: world.server.probes_sent(),
        spurious_retransmits: spurious,
        early_requests: world.server.early_requests(),
        link_drops,
        trace: world.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::{audit_amplification, audit_delivery};

    fn unlimited(rtt: u64, dt: u64, mode: ServerMode, profile: &str) -> RunConfig {
        let mut c = RunConfig::builtin(rtt, dt, mode, profile);
        c.bandwidth_bits_per_s = 0;
        c
    }

    #[test]
    fn no_loss_run_completes_and_drains() {
        let r = simulate(&RunConfig::builtin(9_000, 4_000, ServerMode::Iack, "quic-go")).unwrap();
        assert_eq!(r.status, RunStatus::Quiescent);
        assert!(r.completed());
        assert_eq!(r.probes_sent, 0);
        audit_amplification(&r.trace).unwrap();
        audit_delivery(&r.trace, false).unwrap();
    }

    #[test]
    fn unlimited_link_ttfb_is_two_rtts_plus_delay() {
        for mode in ServerMode::ALL {
            let r = simulate(&unlimited(9_000, 4_000, mode, "quic-go")).unwrap();
            assert_eq!(r.ttfb_us, Some(2 * 9_000 + 4_000), "{mode}");
        }
    }

    #[test]
    fn first_pto_reflects_first_sample() {
        let iack = simulate(&unlimited(9_000, 4_000, ServerMode::Iack, "quic-go")).unwrap();
        let wfc = simulate(&unlimited(9_000, 4_000, ServerMode::Wfc, "quic-go")).unwrap();
        assert_eq!(iack.first_pto_us, Some(27_000));
        assert_eq!(wfc.first_pto_us, Some(39_000));
    }

    #[test]
    fn early_settings_saves_one_rtt() {
        let base = unlimited(9_000, 0, ServerMode::Wfc, "quic-go");
        let mut early = base.clone();
        early.early_settings = true;
        let a = simulate(&base).unwrap().ttfb_us.unwrap();
        let b = simulate(&early).unwrap().ttfb_us.unwrap();
        assert_eq!(a - b, 9_000);
    }

    #[test]
    fn stack_jitter_is_seeded() {
        let mut c = RunConfig::builtin(9_000, 4_000, ServerMode::Iack, "quic-go");
        c.stack_jitter_us = 2_000;
        c.seed = 7;
        let a = simulate(&c).unwrap();
        let b = simulate(&c).unwrap();
        assert_eq!(a.trace, b.trace);
        c.seed = 8;
        let d = simulate(&c).unwrap();
        assert_ne!(a.trace, d.trace);
    }
}
