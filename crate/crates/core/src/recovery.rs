//! RTT estimation and probe timeout computation per RFC 9002.
//!
//! All arithmetic is in integer microseconds. Halving and the EWMA weights use
//! round-half-up, so the first PTO after a sample `s` is `3s` for even `s` and
//! `3s + 2` for odd `s`.

use serde::{Deserialize, Serialize};

use crate::sim::{EventHandle, Scheduler, SimError, SimTime};

/// Timer granularity (kGranularity).
pub const GRANULARITY_US: u64 = 1_000;

/// Default peer max_ack_delay transport parameter.
pub const DEFAULT_MAX_ACK_DELAY_US: u64 = 25_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Initial,
    Handshake,
    Application,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Initial, Space::Handshake, Space::Application];

    pub fn index(self) -> usize {
        match self {
            Space::Initial => 0,
            Space::Handshake => 1,
            Space::Application => 2,
        }
    }
}

fn div_round(num: u64, den: u64) -> u64 {
    (num + den / 2) / den
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RttEstimator {
    latest_rtt: u64,
    min_rtt: u64,
    smoothed_rtt: u64,
    rtt_var: u64,
    has_sample: bool,
    max_ack_delay_peer: u64,
}

impl Default for RttEstimator {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ACK_DELAY_US)
    }
}

impl RttEstimator {
    pub fn new(max_ack_delay_peer: u64) -> Self {
        RttEstimator {
            latest_rtt: 0,
            min_rtt: 0,
            smoothed_rtt: 0,
            rtt_var: 0,
            has_sample: false,
            max_ack_delay_peer,
        }
    }

    pub fn has_sample(&self) -> bool {
        self.has_sample
    }

    pub fn latest_rtt(&self) -> u64 {
        self.latest_rtt
    }

    pub fn min_rtt(&self) -> u64 {
        self.min_rtt
    }

    pub fn smoothed_rtt(&self) -> u64 {
        self.smoothed_rtt
    }

    pub fn rtt_var(&self) -> u64 {
        self.rtt_var
    }

    pub fn max_ack_delay_peer(&self) -> u64 {
        self.max_ack_delay_peer
    }

    /// Feeds one RTT sample.
    ///
    /// The first sample initializes the estimator and ignores `ack_delay`.
    /// Later samples subtract the ack delay (capped at the peer's
    /// max_ack_delay once the handshake is confirmed) unless doing so would
    /// drop below `min_rtt`.
    ///
    /// # Panics
    ///
    /// Panics if `sample_us` is zero.
    pub fn update(&mut self, sample_us: u64, ack_delay_us: u64, handshake_confirmed: bool) {
        assert!(sample_us > 0, "RTT sample must be positive");
        self.latest_rtt = sample_us;
        if !self.has_sample {
            self.has_sample = true;
            self.min_rtt = sample_us;
            self.smoothed_rtt = sample_us;
            self.rtt_var = div_round(sample_us, 2);
            return;
        }
        self.min_rtt = self.min_rtt.min(sample_us);
        let ack_delay = if handshake_confirmed {
            ack_delay_us.min(self.max_ack_delay_peer)
        } else {
            ack_delay_us
        };
        let adjusted = match sample_us.checked_sub(ack_delay) {
            Some(a) if a >= self.min_rtt => a,
            _ => sample_us,
        };
        let deviation = self.smoothed_rtt.abs_diff(adjusted);
        self.rtt_var = div_round(3 * self.rtt_var + deviation, 4);
        self.smoothed_rtt = div_round(7 * self.smoothed_rtt + adjusted, 8);
    }

    /// Overwrites the smoothed RTT after initialization. Used to emulate
    /// clients that seed their estimator with a bogus value.
    pub fn override_smoothed(&mut self, smoothed_us: u64) {
        self.smoothed_rtt = smoothed_us;
    }

    /// Base probe timeout for `space` before backoff.
    pub fn pto_duration(
        &self,
        space: Space,
        handshake_confirmed: bool,
        profile_default_us: u64,
        granularity_us: u64,
    ) -> u64 {
        if !self.has_sample {
            return profile_default_us;
        }
        let mut pto = self.smoothed_rtt + (4 * self.rtt_var).max(granularity_us);
        if space == Space::Application && handshake_confirmed {
            pto += self.max_ack_delay_peer;
        }
        pto
    }
}

/// Functional form of [`RttEstimator::update`].
pub fn update_rtt(
    mut est: RttEstimator,
    sample_us: u64,
    ack_delay_us: u64,
    handshake_confirmed: bool,
) -> RttEstimator {
    est.update(sample_us, ack_delay_us, handshake_confirmed);
    est
}

/// Functional form of [`RttEstimator::pto_duration`] for an unconfirmed handshake.
pub fn pto_duration(est: &RttEstimator, space: Space, profile_default_us: u64, granularity_us: u64) -> u64 {
    est.pto_duration(space, false, profile_default_us, granularity_us)
}

/// Difference between the WFC and IACK first PTO for a certificate delay of
/// `delta_t_us`: `3·(rtt + Δt) − 3·rtt`.
pub fn first_pto_improvement(delta_t_us: u64) -> u64 {
    3 * delta_t_us
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Resend the oldest unacknowledged data.
    RetransmitTail,
    Ping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeDirective {
    pub kind: ProbeKind,
    pub datagrams: u8,
    pub space: Space,
}

#[derive(Debug, Clone)]
pub struct PtoState {
    backoff_exponent: u32,
    timer: Option<EventHandle>,
    space: Space,
}

impl Default for PtoState {
    fn default() -> Self {
        Self::new(Space::Initial)
    }
}

impl PtoState {
    pub fn new(space: Space) -> Self {
        PtoState {
            backoff_exponent: 0,
            timer: None,
            space,
        }
    }

    pub fn backoff_exponent(&self) -> u32 {
        self.backoff_exponent
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn timer(&self) -> Option<EventHandle> {
        self.timer
    }

    pub fn set_space(&mut self, space: Space) {
        self.space = space;
    }

    /// `base · 2^backoff_exponent`.
    pub fn effective(&self, base_us: u64) -> u64 {
        base_us << self.backoff_exponent
    }

    /// Cancels any pending timer and schedules expiry at `from + effective(base)`.
    /// Deadlines that have already passed fire immediately.
    pub fn arm<E>(
        &mut self,
        sched: &mut Scheduler<E>,
        base_us: u64,
        from: SimTime,
        payload: E,
    ) -> Result<(EventHandle, SimTime), SimError> {
        assert!(base_us > 0, "PTO base must be positive");
        self.disarm(sched);
        let at = (from + self.effective(base_us)).max(sched.now());
        let handle = sched.schedule(at, payload)?;
        self.timer = Some(handle);
        Ok((handle, at))
    }

    pub fn disarm<E>(&mut self, sched: &mut Scheduler<E>) -> bool {
        match self.timer.take() {
            Some(h) => sched.cancel(h),
            None => false,
        }
    }

    /// A newly acknowledging ACK resets the backoff.
    pub fn on_newly_acked(&mut self) {
        self.backoff_exponent = 0;
    }

    /// Called when the timer fired. Bumps the backoff and tells the caller
    /// what to send.
    pub fn on_expired(&mut self, has_tail_in_flight: bool, probe_count: u8) -> ProbeDirective {
        self.timer = None;
        self.backoff_exponent += 1;
        ProbeDirective {
            kind: if has_tail_in_flight {
                ProbeKind::RetransmitTail
            } else {
                ProbeKind::Ping
            },
            datagrams: probe_count.clamp(1, 2),
            space: self.space,
        }
    }
}
