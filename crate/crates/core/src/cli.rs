//! Scenario execution, figure reproduction and CSV/trace persistence behind
//! the `iacksim` binary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    guideline_table, pto_evolution, recommend_mode, relative_improvement, spurious_retransmit,
    summarize, CsvRow, GuidelineCell, LossScenario, SummaryRow, TtfbSummary,
};
use crate::config::{Cell, ConfigError, Grid, LossRuleConfig, ScenarioConfig};
use crate::endpoints::ServerMode;
use crate::netem::{ContentSelector, LossRule};
use crate::profiles::{builtin_profiles, lookup, Quirk};
use crate::simulation::{simulate, RunConfig, RunResult, SimulationError, LARGE_CERT_BYTES, SMALL_CERT_BYTES};
use crate::traces::{
    ack_delay_vs_rtt, ack_sh_delay, classify, emit_trace, observation_from_trace,
    HandshakeObservation, TraceError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cell {cell}: {source}")]
    Simulation {
        cell: String,
        #[source]
        source: SimulationError,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("all {0} observation lines were malformed")]
    AllMalformed(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Figure {
    #[value(name = "fig2")]
    Fig2,
    #[value(name = "fig3")]
    Fig3,
    #[value(name = "loss_first_server_flight")]
    LossFirstServerFlight,
    #[value(name = "loss_second_client_flight")]
    LossSecondClientFlight,
    #[value(name = "amplification")]
    Amplification,
    #[value(name = "guidelines")]
    Guidelines,
}

impl Figure {
    pub const ALL: [Figure; 6] = [
        Figure::Fig2,
        Figure::Fig3,
        Figure::LossFirstServerFlight,
        Figure::LossSecondClientFlight,
        Figure::Amplification,
        Figure::Guidelines,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::LossFirstServerFlight => "loss_first_server_flight",
            Figure::LossSecondClientFlight => "loss_second_client_flight",
            Figure::Amplification => "amplification",
            Figure::Guidelines => "guidelines",
        }
    }
}

impl std::str::FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown figure `{s}`"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads; `None` lets rayon decide.
    pub parallelism: Option<usize>,
    /// Replaces the config's base seed.
    pub seed: Option<u64>,
}

/// Runs every config on a dedicated pool, keeping input order.
pub fn execute(configs: &[RunConfig], parallelism: Option<usize>) -> Result<Vec<Result<RunResult, SimulationError>>, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = parallelism {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build()?;
    Ok(pool.install(|| configs.par_iter().map(simulate).collect()))
}

pub fn csv_row(cell: &Cell, result: &RunResult) -> CsvRow {
    CsvRow {
        scenario_id: cell.scenario_id.clone(),
        mode: cell.run.mode,
        rtt_us: cell.run.rtt_us,
        delta_t_us: cell.run.delta_t_us,
        cert_bytes: cell.run.cert_bytes,
        profile: cell.run.profile.name.clone(),
        ttfb_us: result.ttfb_us,
        completed: result.ttfb_us.is_some(),
        probes_sent: result.probes_sent,
        spurious_retransmits: result.spurious_retransmits,
        repetition: cell.repetition,
        seed: cell.run.seed,
    }
}

/// Groups rows by scenario id in first-seen order.
pub fn summaries(rows: &[CsvRow]) -> Vec<TtfbSummary> {
    let mut order: Vec<(String, ServerMode)> = Vec::new();
    let mut groups: BTreeMap<(String, ServerMode), Vec<Option<u64>>> = BTreeMap::new();
    for r in rows {
        let key = (r.scenario_id.clone(), r.mode);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.ttfb_us);
    }
    order
        .into_iter()
        .map(|k| summarize(&k.0, k.1, &groups[&k]))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub cells: Vec<Cell>,
    pub results: Vec<RunResult>,
    pub rows: Vec<CsvRow>,
    pub summaries: Vec<TtfbSummary>,
    /// Run ids that never delivered a first application byte.
    pub failed: Vec<String>,
}

impl RunReport {
    pub fn result_for(&self, scenario_id: &str) -> Option<&RunResult> {
        self.cells
            .iter()
            .position(|c| c.scenario_id == scenario_id)
            .map(|i| &self.results[i])
    }
}

/// Expands and runs `cfg` without touching the file system.
pub fn run_cells(cfg: &ScenarioConfig, parallelism: Option<usize>) -> Result<RunReport, CliError> {
    let cells = cfg.expand()?;
    let configs: Vec<RunConfig> = cells.iter().map(|c| c.run.clone()).collect();
    let mut results = Vec::with_capacity(cells.len());
    for (cell, res) in cells.iter().zip(execute(&configs, parallelism)?) {
        results.push(res.map_err(|source| CliError::Simulation {
            cell: cell.run_id(),
            source,
        })?);
    }
    let rows: Vec<CsvRow> = cells.iter().zip(&results).map(|(c, r)| csv_row(c, r)).collect();
    let failed = cells
        .iter()
        .zip(&rows)
        .filter(|(_, r)| !r.completed)
        .map(|(c, _)| c.run_id())
        .collect();
    Ok(RunReport {
        summaries: summaries(&rows),
        cells,
        results,
        rows,
        failed,
    })
}

/// Writes `traces/<run>.jsonl`, `<name>.csv`, `<name>-summary.csv` and
/// `<name>-observations.jsonl` under `out_dir`.
pub fn persist(cfg: &ScenarioConfig, report: &RunReport, out_dir: &Path) -> Result<(), CliError> {
    let trace_dir = out_dir.join("traces");
    create_dir(&trace_dir)?;
    for (cell, result) in report.cells.iter().zip(&report.results) {
        let path = trace_dir.join(format!("{}.jsonl", cell.run_id()));
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        emit_trace(&result.trace, &mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
    }
    write_csv(&out_dir.join(format!("{}.csv", cfg.name)), &report.rows)?;
    let summary: Vec<SummaryRow> = report.summaries.iter().map(SummaryRow::from).collect();
    write_csv(&out_dir.join(format!("{}-summary.csv", cfg.name)), &summary)?;

    let obs_path = out_dir.join(format!("{}-observations.jsonl", cfg.name));
    let mut w = BufWriter::new(File::create(&obs_path).map_err(io_err(&obs_path))?);
    for (cell, result) in report.cells.iter().zip(&report.results) {
        if let Some(mut obs) = observation_from_trace(&result.trace) {
            obs.id = Some(cell.run_id());
            let line = serde_json::to_string(&obs).expect("observation serializes");
            writeln!(w, "{line}").map_err(io_err(&obs_path))?;
        }
    }
    w.flush().map_err(io_err(&obs_path))?;
    Ok(())
}

pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let report = run_cells(&cfg, opts.parallelism)?;
    create_dir(&opts.out_dir)?;
    persist(&cfg, &report, &opts.out_dir)?;
    Ok(report)
}

pub fn all_profile_names() -> Vec<String> {
    builtin_profiles().into_iter().map(|p| p.name).collect()
}

// ---------------------------------------------------------------- fig2

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fig2Row {
    pub rtt_us: u64,
    pub delta_t_us: u64,
    pub sample_index: usize,
    pub model_pto_wfc_us: u64,
    pub model_pto_iack_us: u64,
    pub model_gap_us: u64,
    pub sim_pto_wfc_us: Option<u64>,
    pub sim_pto_iack_us: Option<u64>,
}

pub const FIG2_RTT_US: [u64; 5] = [1_000, 9_000, 20_000, 100_000, 300_000];
pub const FIG2_DELTA_T_US: [u64; 4] = [0, 1_000, 4_000, 10_000];
pub const FIG2_SAMPLES: usize = 10;

/// Runs without serialization delay so the first samples are exactly
/// `rtt` and `rtt + Δt`.
pub fn pto_law_config(rtt_us: u64, delta_t_us: u64, mode: ServerMode, profile: &str) -> RunConfig {
    let mut c = RunConfig::builtin(rtt_us, delta_t_us, mode, profile);
    c.bandwidth_bits_per_s = 0;
    c
}

pub fn fig2_rows(parallelism: Option<usize>) -> Result<Vec<Fig2Row>, CliError> {
    let mut grid = Vec::new();
    let mut configs = Vec::new();
    for rtt in FIG2_RTT_US {
        for dt in FIG2_DELTA_T_US {
            grid.push((rtt, dt));
            for mode in ServerMode::ALL {
                configs.push(pto_law_config(rtt, dt, mode, "quic-go"));
            }
        }
    }
    let mut first_ptos = Vec::with_capacity(configs.len());
    for (c, res) in configs.iter().zip(execute(&configs, parallelism)?) {
        let r = res.map_err(|source| CliError::Simulation {
            cell: format!("fig2-rtt{}-dt{}-{}", c.rtt_us, c.delta_t_us, c.mode),
            source,
        })?;
        first_ptos.push(r.first_pto_us);
    }
    let mut rows = Vec::new();
    for (i, (rtt, dt)) in grid.into_iter().enumerate() {
        let (sim_iack, sim_wfc) = (first_ptos[2 * i], first_ptos[2 * i + 1]);
        let series = pto_evolution(rtt, dt, FIG2_SAMPLES).expect("positive rtt");
        for p in series.points {
            let first = p.sample_index == 0;
            rows.push(Fig2Row {
                rtt_us: rtt,
                delta_t_us: dt,
                sample_index: p.sample_index,
                model_pto_wfc_us: p.pto_wfc_us,
                model_pto_iack_us: p.pto_iack_us,
                model_gap_us: p.gap_us(),
                sim_pto_wfc_us: if first { sim_wfc } else { None },
                sim_pto_iack_us: if first { sim_iack } else { None },
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------- fig3

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig3Row {
    pub rtt_us: u64,
    pub delta_t_us: u64,
    pub relative_improvement: f64,
    pub model_spurious: bool,
    pub sim_spurious: bool,
    pub sim_spurious_probes: u32,
}

pub const FIG3_RTT_US: [u64; 6] = [1_000, 3_000, 9_000, 20_000, 50_000, 100_000];
pub const FIG3_DELTA_T_US: [u64; 12] = [
    0, 1_000, 2_000, 3_200, 5_000, 10_000, 20_900, 30_000, 50_000, 100_000, 200_000, 300_000,
];

pub fn fig3_rows(parallelism: Option<usize>) -> Result<Vec<Fig3Row>, CliError> {
    let mut grid = Vec::new();
    for rtt in FIG3_RTT_US {
        for dt in FIG3_DELTA_T_US {
            grid.push((rtt, dt));
        }
    }
    let configs: Vec<RunConfig> = grid
        .iter()
        .map(|&(rtt, dt)| pto_law_config(rtt, dt, ServerMode::Iack, "quic-go"))
        .collect();
    let results = execute(&configs, parallelism)?;
    grid.into_iter()
        .zip(results)
        .map(|((rtt, dt), res)| {
            let r = res.map_err(|source| CliError::Simulation {
                cell: format!("fig3-rtt{rtt}-dt{dt}"),
                source,
            })?;
            Ok(Fig3Row {
                rtt_us: rtt,
                delta_t_us: dt,
                relative_improvement: relative_improvement(rtt, dt),
                model_spurious: spurious_retransmit(rtt, dt),
                sim_spurious: r.spurious_retransmits > 0,
                sim_spurious_probes: r.spurious_retransmits,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- per-profile comparisons

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComparisonRow {
    pub profile: String,
    pub iack_ttfb_us: Option<u64>,
    pub wfc_ttfb_us: Option<u64>,
    /// WFC minus IACK.
    pub ttfb_difference_us: Option<i64>,
    pub iack_handshake_us: Option<u64>,
    pub wfc_handshake_us: Option<u64>,
    pub handshake_difference_us: Option<i64>,
    pub model_difference_us: Option<i64>,
}

fn diff(wfc: Option<u64>, iack: Option<u64>) -> Option<i64> {
    Some(wfc? as i64 - iack? as i64)
}

pub const CANONICAL_RTT_US: u64 = 9_000;
pub const CANONICAL_DELTA_T_US: u64 = 4_000;
pub const AMPLIFICATION_DELTA_T_US: u64 = 200_000;

/// The scenario behind each per-profile figure.
pub fn figure_scenario(figure: Figure) -> Option<ScenarioConfig> {
    let mut cfg = ScenarioConfig::new(figure.name());
    cfg.profiles = Grid::Many(all_profile_names());
    cfg.rtt_us = Grid::One(CANONICAL_RTT_US);
    cfg.delta_t_us = Grid::One(CANONICAL_DELTA_T_US);
    match figure {
        Figure::LossFirstServerFlight | Figure::LossSecondClientFlight => {
            let sel = if figure == Figure::LossFirstServerFlight {
                ContentSelector::RemainingFirstServerFlight
            } else {
                ContentSelector::EntireSecondClientFlight
            };
            cfg.bandwidth_bits_per_s = 0;
            cfg.loss = vec![LossRuleConfig {
                direction: sel.direction(),
                indices: None,
                content: Some(sel.name().to_string()),
                max_applications: None,
            }];
        }
        Figure::Amplification => {
            cfg.cert_bytes = Grid::One(LARGE_CERT_BYTES);
            cfg.delta_t_us = Grid::One(AMPLIFICATION_DELTA_T_US);
        }
        _ => return None,
    }
    Some(cfg)
}

fn model_difference(figure: Figure, cfg: &ScenarioConfig) -> Option<i64> {
    let rtt = CANONICAL_RTT_US as i64;
    let dt = CANONICAL_DELTA_T_US as i64;
    match figure {
        Figure::LossSecondClientFlight => Some(3 * dt),
        Figure::LossFirstServerFlight => Some(-(cfg.server_default_pto_us as i64 - 3 * (rtt + dt))),
        _ => None,
    }
}

pub fn comparison_rows(figure: Figure, cfg: &ScenarioConfig, report: &RunReport) -> Vec<ComparisonRow> {
    let rtt = cfg.rtt_us.values()[0];
    let dt = cfg.delta_t_us.values()[0];
    let cert = cfg.cert_bytes.values()[0];
    cfg.profiles
        .values()
        .into_iter()
        .map(|p| {
            let get = |mode| {
                report.result_for(&crate::config::scenario_id(&cfg.name, rtt, dt, cert, mode, &p))
            };
            let (iack, wfc) = (get(ServerMode::Iack), get(ServerMode::Wfc));
            let ttfb = |r: Option<&RunResult>| r.and_then(|r| r.ttfb_us);
            let hs = |r: Option<&RunResult>| r.and_then(|r| r.client_handshake_complete_us);
            let ignores_iack = lookup(&p).map(|pr| pr.has(Quirk::IgnoreIackRttSample)).unwrap_or(false);
            ComparisonRow {
                profile: p.clone(),
                iack_ttfb_us: ttfb(iack),
                wfc_ttfb_us: ttfb(wfc),
                ttfb_difference_us: diff(ttfb(wfc), ttfb(iack)),
                iack_handshake_us: hs(iack),
                wfc_handshake_us: hs(wfc),
                handshake_difference_us: diff(hs(wfc), hs(iack)),
                model_difference_us: if ignores_iack && figure == Figure::LossSecondClientFlight {
                    Some(0)
                } else {
                    model_difference(figure, cfg)
                },
            }
        })
        .collect()
}

// ---------------------------------------------------------------- guidelines

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GuidelineRow {
    pub cert_exceeds_limit: bool,
    pub loss: &'static str,
    pub delta_t_condition: &'static str,
    pub recommended: ServerMode,
    pub iack_ttfb_dt4_us: Option<u64>,
    pub wfc_ttfb_dt4_us: Option<u64>,
    pub iack_ttfb_dt40_us: Option<u64>,
    pub wfc_ttfb_dt40_us: Option<u64>,
    /// The recommended mode is no slower than the alternative at both Δt.
    pub consistent: bool,
}

pub const GUIDELINE_DELTA_T_US: [u64; 2] = [4_000, 40_000];
pub const GUIDELINE_PROFILE: &str = "quic-go";

fn loss_rules_for(loss: LossScenario) -> Vec<LossRule> {
    match loss {
        LossScenario::None => Vec::new(),
        LossScenario::FirstServerFlightRemainder => {
            vec![LossRule::by_content(ContentSelector::RemainingFirstServerFlight)]
        }
        LossScenario::SecondClientFlight => {
            vec![LossRule::by_content(ContentSelector::EntireSecondClientFlight)]
        }
    }
}

/// Simulates every table cell in both modes at both Δt values on the
/// 10 Mbit/s link.
pub fn guideline_rows(parallelism: Option<usize>) -> Result<Vec<GuidelineRow>, CliError> {
    let table = guideline_table();
    let mut configs = Vec::new();
    for cell in &table {
        for dt in GUIDELINE_DELTA_T_US {
            for mode in ServerMode::ALL {
                let mut c = RunConfig::builtin(CANONICAL_RTT_US, dt, mode, GUIDELINE_PROFILE);
                c.cert_bytes = if cell.cert_exceeds_limit {
                    LARGE_CERT_BYTES
                } else {
                    SMALL_CERT_BYTES
                };
                c.loss = loss_rules_for(cell.loss);
                configs.push(c);
            }
        }
    }
    let results = execute(&configs, parallelism)?;
    let mut ttfb = Vec::with_capacity(results.len());
    for (c, r) in configs.iter().zip(results) {
        let r = r.map_err(|source| CliError::Simulation {
            cell: format!("guidelines-dt{}-{}", c.delta_t_us, c.mode),
            source,
        })?;
        ttfb.push(r.ttfb_us);
    }
    Ok(table
        .iter()
        .enumerate()
        .map(|(i, cell)| guideline_row(cell, &ttfb[4 * i..4 * i + 4]))
        .collect())
}

fn not_slower(recommended: Option<u64>, other: Option<u64>) -> bool {
    match (recommended, other) {
        (Some(a), Some(b)) => a <= b,
        (Some(_), None) => true,
        (None, other) => other.is_none(),
    }
}

fn guideline_row(cell: &GuidelineCell, t: &[Option<u64>]) -> GuidelineRow {
    // t = [iack dt4, wfc dt4, iack dt40, wfc dt40]
    let consistent = (0..2).all(|k| {
        let (iack, wfc) = (t[2 * k], t[2 * k + 1]);
        match cell.mode {
            ServerMode::Iack => not_slower(iack, wfc),
            ServerMode::Wfc => not_slower(wfc, iack),
        }
    });
    GuidelineRow {
        cert_exceeds_limit: cell.cert_exceeds_limit,
        loss: cell.loss.name(),
        delta_t_condition: match cell.delta_t_at_least_3rtt {
            Some(true) => "at_least_3rtt",
            Some(false) => "below_3rtt",
            None => "any",
        },
        recommended: cell.mode,
        iack_ttfb_dt4_us: t[0],
        wfc_ttfb_dt4_us: t[1],
        iack_ttfb_dt40_us: t[2],
        wfc_ttfb_dt40_us: t[3],
        consistent,
    }
}

/// The guideline decision for a concrete run configuration.
pub fn recommend_for(cfg: &RunConfig, loss: LossScenario) -> ServerMode {
    let budget = 3 * crate::endpoints::MIN_INITIAL_DATAGRAM;
    let flight: u64 = cfg.server_config().flight_datagram_sizes().iter().sum();
    recommend_mode(flight > budget, loss, cfg.delta_t_us, cfg.rtt_us)
}

// ---------------------------------------------------------------- reproduce

/// Files written by `reproduce`.
pub fn reproduce(figure: Figure, opts: &RunOptions) -> Result<Vec<PathBuf>, CliError> {
    create_dir(&opts.out_dir)?;
    let out = |name: &str| opts.out_dir.join(name);
    let mut files = Vec::new();
    match figure {
        Figure::Fig2 => {
            let p = out("fig2.csv");
            write_csv(&p, &fig2_rows(opts.parallelism)?)?;
            files.push(p);
        }
        Figure::Fig3 => {
            let p = out("fig3.csv");
            write_csv(&p, &fig3_rows(opts.parallelism)?)?;
            files.push(p);
        }
        Figure::Guidelines => {
            let p = out("guidelines.csv");
            write_csv(&p, &guideline_rows(opts.parallelism)?)?;
            files.push(p);
        }
        Figure::LossFirstServerFlight | Figure::LossSecondClientFlight | Figure::Amplification => {
            let cfg = figure_scenario(figure).expect("per-profile figure");
            let report = run_scenario(&cfg, opts)?;
            let p = out(&format!("{}-comparison.csv", figure.name()));
            write_csv(&p, &comparison_rows(figure, &cfg, &report))?;
            files.push(out(&format!("{}.csv", cfg.name)));
            files.push(out(&format!("{}-summary.csv", cfg.name)));
            files.push(p);
        }
    }
    Ok(files)
}

// ---------------------------------------------------------------- classify-file

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassificationRow {
    pub line: usize,
    pub id: Option<String>,
    pub classification: &'static str,
    pub ack_sh_delay_us: Option<u64>,
    pub ack_delay_exceeds_rtt: Option<bool>,
    pub ack_delay_minus_rtt_us: Option<i64>,
}

#[derive(Debug, Clone, Default)]
pub struct ClassifyReport {
    pub rows: Vec<ClassificationRow>,
    /// (line, message) for every rejected line.
    pub malformed: Vec<(usize, String)>,
}

pub fn classification_row(line: usize, obs: &HandshakeObservation) -> ClassificationRow {
    let cmp = ack_delay_vs_rtt(obs);
    ClassificationRow {
        line,
        id: obs.id.clone(),
        classification: classify(obs).name(),
        ack_sh_delay_us: ack_sh_delay(obs),
        ack_delay_exceeds_rtt: cmp.map(|c| c.exceeds_rtt),
        ack_delay_minus_rtt_us: cmp.map(|c| c.difference_us),
    }
}

/// One JSON observation per line; blank lines are ignored.
pub fn classify_reader<R: BufRead>(input: R) -> Result<ClassifyReport, std::io::Error> {
    let mut report = ClassifyReport::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<HandshakeObservation>(&line) {
            Ok(obs) => report.rows.push(classification_row(i + 1, &obs)),
            Err(e) => report.malformed.push((i + 1, e.to_string())),
        }
    }
    Ok(report)
}

pub fn classify_file(path: &Path) -> Result<ClassifyReport, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let report = classify_reader(BufReader::new(file)).map_err(io_err(path))?;
    if report.rows.is_empty() && !report.malformed.is_empty() {
        return Err(CliError::AllMalformed(report.malformed.len()));
    }
    Ok(report)
}

pub fn profiles_table() -> String {
    let mut s = format!(
        "{:<10} {:>14} {:>13} {:>6}  {}\n",
        "name", "default_pto_ms", "second_flight", "probes", "quirks"
    );
    for p in builtin_profiles() {
        let quirks: Vec<String> = p
            .quirks
            .iter()
            .map(|q| serde_json::to_string(q).expect("quirk").trim_matches('"').to_string())
            .collect();
        s.push_str(&format!(
            "{:<10} {:>14} {:>13} {:>6}  {}\n",
            p.name,
            p.default_pto_us / 1000,
            p.second_flight_len(),
            p.probe_count,
            if quirks.is_empty() { "-".to_string() } else { quirks.join(",") }
        ));
    }
    s
}
