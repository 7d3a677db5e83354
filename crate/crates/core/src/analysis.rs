//! Closed-form PTO model, deployment guideline, and metric extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoints::wire::Actor;
use crate::endpoints::ServerMode;
use crate::recovery::{update_rtt, RttEstimator, Space, GRANULARITY_US};
use crate::traces::{TraceEvent, TraceKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("rtt must be positive")]
    ZeroRtt,
    #[error("series needs at least one point")]
    EmptySeries,
    #[error("trace has no first application byte")]
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtoPoint {
    pub sample_index: usize,
    pub pto_wfc_us: u64,
    pub pto_iack_us: u64,
}

impl PtoPoint {
    pub fn gap_us(&self) -> u64 {
        self.pto_wfc_us.saturating_sub(self.pto_iack_us)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtoSeries {
    pub rtt_us: u64,
    pub delta_t_us: u64,
    pub points: Vec<PtoPoint>,
}

/// Both tracks start from their first sample (`rtt + Δt` for WFC, `rtt`
/// for IACK) and then see `n − 1` further samples of exactly `rtt`.
pub fn pto_evolution(rtt_us: u64, delta_t_us: u64, n: usize) -> Result<PtoSeries, AnalysisError> {
    if rtt_us == 0 {
        return Err(AnalysisError::ZeroRtt);
    }
    if n == 0 {
        return Err(AnalysisError::EmptySeries);
    }
    let pto = |e: &RttEstimator| e.pto_duration(Space::Initial, false, 0, GRANULARITY_US);
    let mut wfc = update_rtt(RttEstimator::default(), rtt_us + delta_t_us, 0, false);
    let mut iack = update_rtt(RttEstimator::default(), rtt_us, 0, false);
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            wfc = update_rtt(wfc, rtt_us, 0, false);
            iack = update_rtt(iack, rtt_us, 0, false);
        }
        points.push(PtoPoint {
            sample_index: i,
            pto_wfc_us: pto(&wfc),
            pto_iack_us: pto(&iack),
        });
    }
    Ok(PtoSeries {
        rtt_us,
        delta_t_us,
        points,
    })
}

/// The client's PTO after a single sample of `rtt_us`: `3·rtt` for even
/// values.
pub fn first_pto(rtt_us: u64) -> u64 {
    update_rtt(RttEstimator::default(), rtt_us, 0, false).pto_duration(
        Space::Initial,
        false,
        0,
        GRANULARITY_US,
    )
}

/// Whether an IACK client probes before the ServerHello shows up. A
/// ServerHello arriving exactly when the timer fires counts as spurious.
pub fn spurious_retransmit(rtt_us: u64, delta_t_us: u64) -> bool {
    assert!(rtt_us > 0, "rtt must be positive");
    delta_t_us >= first_pto(rtt_us)
}

/// First-PTO gain relative to the RTT: `3·Δt / rtt`.
pub fn relative_improvement(rtt_us: u64, delta_t_us: u64) -> f64 {
    3.0 * delta_t_us as f64 / rtt_us as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScenario {
    None,
    FirstServerFlightRemainder,
    SecondClientFlight,
}

impl LossScenario {
    pub const ALL: [LossScenario; 3] = [
        LossScenario::None,
        LossScenario::FirstServerFlightRemainder,
        LossScenario::SecondClientFlight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossScenario::None => "none",
            LossScenario::FirstServerFlightRemainder => "first_server_flight_remainder",
            LossScenario::SecondClientFlight => "second_client_flight",
        }
    }
}

pub fn recommend_mode(
    cert_exceeds_limit: bool,
    loss: LossScenario,
    delta_t_us: u64,
    rtt_us: u64,
) -> ServerMode {
    if cert_exceeds_limit {
        return ServerMode::Iack;
    }
    match loss {
        LossScenario::FirstServerFlightRemainder => ServerMode::Wfc,
        LossScenario::SecondClientFlight => ServerMode::Iack,
        LossScenario::None if delta_t_us < 3 * rtt_us => ServerMode::Iack,
        LossScenario::None => ServerMode::Wfc,
    }
}

/// One cell of the deployment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineCell {
    pub cert_exceeds_limit: bool,
    pub loss: LossScenario,
    /// Only meaningful without loss: whether Δt is at least 3·rtt.
    pub delta_t_at_least_3rtt: Option<bool>,
    pub mode: ServerMode,
}

/// The eight cells, row by row.
pub fn guideline_table() -> Vec<GuidelineCell> {
    let mut cells = Vec::with_capacity(8);
    for exceeds in [false, true] {
        for (loss, slow) in [
            (LossScenario::None, Some(false)),
            (LossScenario::None, Some(true)),
            (LossScenario::FirstServerFlightRemainder, None),
            (LossScenario::SecondClientFlight, None),
        ] {
            // representative Δt on each side of the 3·rtt boundary
            let rtt = 9_000;
            let dt = if slow == Some(true) { 3 * rtt } else { rtt };
            cells.push(GuidelineCell {
                cert_exceeds_limit: exceeds,
                loss,
                delta_t_at_least_3rtt: slow,
                mode: recommend_mode(exceeds, loss, dt, rtt),
            });
        }
    }
    cells
}

/// First client emission to the client's first application byte.
pub fn extract_ttfb(trace: &[TraceEvent]) -> Result<u64, AnalysisError> {
    let start = trace
        .iter()
        .find(|e| e.kind == TraceKind::Emit && e.actor == Actor::Client)
        .ok_or(AnalysisError::Incomplete)?;
    let first = trace
        .iter()
        .find(|e| e.kind == TraceKind::FirstAppByte && e.actor == Actor::Client)
        .ok_or(AnalysisError::Incomplete)?;
    Ok(first.time_us.since(start.time_us))
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 · n)`, with rank 1 for `p = 0`.
pub fn nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtfbSummary {
    pub scenario_id: String,
    pub mode: ServerMode,
    pub runs: usize,
    pub completed: usize,
    pub ttfb_us: Vec<u64>,
    pub median_us: Option<u64>,
    pub p25_us: Option<u64>,
    pub p75_us: Option<u64>,
    pub p90_us: Option<u64>,
}

impl TtfbSummary {
    /// No run finished.
    pub fn is_empty(&self) -> bool {
        self.completed == 0
    }
}

/// Incomplete runs (`None`) are counted but excluded from the statistics.
pub fn summarize(scenario_id: &str, mode: ServerMode, ttfbs: &[Option<u64>]) -> TtfbSummary {
    let mut done: Vec<u64> = ttfbs.iter().flatten().copied().collect();
    done.sort_unstable();
    TtfbSummary {
        scenario_id: scenario_id.to_string(),
        mode,
        runs: ttfbs.len(),
        completed: done.len(),
        median_us: nearest_rank(&done, 50.0),
        p25_us: nearest_rank(&done, 25.0),
        p75_us: nearest_rank(&done, 75.0),
        p90_us: nearest_rank(&done, 90.0),
        ttfb_us: done,
    }
}

/// One simulation run as written to the results CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario_id: String,
    pub mode: ServerMode,
    pub rtt_us: u64,
    pub delta_t_us: u64,
    pub cert_bytes: u64,
    pub profile: String,
    pub ttfb_us: Option<u64>,
    pub completed: bool,
    pub probes_sent: u32,
    pub spurious_retransmits: u32,
    pub repetition: u32,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "scenario_id,mode,rtt_us,delta_t_us,cert_bytes,profile,ttfb_us,completed,probes_sent,spurious_retransmits,repetition,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub mode: ServerMode,
    pub runs: usize,
    pub completed: usize,
    pub median_ttfb_us: Option<u64>,
    pub p25_ttfb_us: Option<u64>,
    pub p75_ttfb_us: Option<u64>,
    pub p90_ttfb_us: Option<u64>,
}

impl From<&TtfbSummary> for SummaryRow {
    fn from(s: &TtfbSummary) -> Self {
        SummaryRow {
            scenario_id: s.scenario_id.clone(),
            mode: s.mode,
            runs: s.runs,
            completed: s.completed,
            median_ttfb_us: s.median_us,
            p25_ttfb_us: s.p25_us,
            p75_ttfb_us: s.p75_us,
            p90_ttfb_us: s.p90_us,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimTime;
    use proptest::prelude::*;

    #[test]
    fn fig2_point_zero() {
        let s = pto_evolution(9_000, 4_000, 10).unwrap();
        assert_eq!(s.points[0].pto_wfc_us, 39_000);
        assert_eq!(s.points[0].pto_iack_us, 27_000);
        assert_eq!(s.points[0].gap_us(), 12_000);
        let gaps: Vec<u64> = s.points.iter().map(PtoPoint::gap_us).collect();
        // variance absorbs the first deviation, so the gap peaks before decaying
        assert_eq!(&gaps[..7], &[12_000, 13_500, 14_063, 13_996, 13_509, 12_772, 11_888]);
        assert!(gaps[9] < gaps[0] && gaps[9] > 0);
    }

    #[test]
    fn zero_delay_tracks_coincide() {
        let s = pto_evolution(20_000, 0, 8).unwrap();
        assert!(s.points.iter().all(|p| p.gap_us() == 0));
    }

    #[test]
    fn series_errors() {
        assert_eq!(pto_evolution(0, 1, 1), Err(AnalysisError::ZeroRtt));
        assert_eq!(pto_evolution(1, 1, 0), Err(AnalysisError::EmptySeries));
    }

    #[test]
    fn spurious_boundary() {
        assert!(!spurious_retransmit(9_000, 26_000));
        assert!(spurious_retransmit(9_000, 28_000));
        assert!(spurious_retransmit(9_000, 27_000));
        assert!(!spurious_retransmit(3_000, 7_200));
        assert!((relative_improvement(9_000, 4_000) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn guideline_cells() {
        use LossScenario::*;
        use ServerMode::*;
        assert_eq!(recommend_mode(true, FirstServerFlightRemainder, 1, 9_000), Iack);
        assert_eq!(recommend_mode(false, None, 27_000, 9_000), Wfc);
        assert_eq!(recommend_mode(false, None, 26_999, 9_000), Iack);
        assert_eq!(recommend_mode(false, SecondClientFlight, 100_000, 9_000), Iack);
        assert_eq!(recommend_mode(false, FirstServerFlightRemainder, 1, 9_000), Wfc);
        let table = guideline_table();
        assert_eq!(table.len(), 8);
        let modes: Vec<_> = table.iter().map(|c| c.mode).collect();
        assert_eq!(modes, vec![Iack, Wfc, Wfc, Iack, Iack, Iack, Iack, Iack]);
    }

    #[test]
    fn ttfb_extraction() {
        let trace = vec![
            TraceEvent::new(SimTime(0), Actor::Client, TraceKind::Emit),
            TraceEvent::new(SimTime(22_000), Actor::Client, TraceKind::FirstAppByte),
        ];
        assert_eq!(extract_ttfb(&trace), Ok(22_000));
        assert_eq!(extract_ttfb(&trace[..1]), Err(AnalysisError::Incomplete));
    }

    #[test]
    fn summary_rules() {
        let s = summarize("x", ServerMode::Iack, &[Some(12), Some(10), Some(11)]);
        assert_eq!(s.median_us, Some(11));
        let s = summarize("x", ServerMode::Iack, &[Some(7)]);
        assert_eq!(s.median_us, Some(7));
        assert_eq!(s.p90_us, Some(7));
        let s = summarize("x", ServerMode::Wfc, &[Some(5), None, Some(9)]);
        assert_eq!((s.runs, s.completed), (3, 2));
        assert_eq!(s.median_us, Some(5));
        let s = summarize("x", ServerMode::Wfc, &[None, None]);
        assert!(s.is_empty());
        assert_eq!(s.median_us, None);
    }

    /// Standalone EWMA, written out longhand with rational arithmetic and
    /// explicit rounding.
    fn oracle_pto_track(first: u64, rest: u64, n: usize) -> Vec<u64> {
        let round = |num: u64, den: u64| (2 * num + den) / (2 * den);
        let mut smoothed = first;
        let mut var = round(first, 2);
        let mut out = vec![smoothed + std::cmp::max(4 * var, 1_000)];
        for _ in 1..n {
            let dev = smoothed.abs_diff(rest);
            var = round(3 * var + dev, 4);
            smoothed = round(7 * smoothed + rest, 8);
            out.push(smoothed + std::cmp::max(4 * var, 1_000));
        }
        out
    }

    proptest! {
        #[test]
        fn evolution_matches_oracle(rtt in 1u64..400_000, dt in 0u64..300_000, n in 1usize..30) {
            let s = pto_evolution(rtt, dt, n).unwrap();
            let wfc = oracle_pto_track(rtt + dt, rtt, n);
            let iack = oracle_pto_track(rtt, rtt, n);
            for (i, p) in s.points.iter().enumerate() {
                prop_assert_eq!(p.pto_wfc_us, wfc[i]);
                prop_assert_eq!(p.pto_iack_us, iack[i]);
            }
        }

        #[test]
        fn iack_never_slower(rtt in 1u64..400_000, dt in 0u64..300_000) {
            let s = pto_evolution(rtt, dt, 40).unwrap();
            for p in &s.points {
                prop_assert!(p.pto_wfc_us >= p.pto_iack_us);
            }
        }
    }
}
