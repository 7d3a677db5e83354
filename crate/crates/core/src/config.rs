//! Scenario files: TOML with strict keys, scalar-or-list grids, and
//! expansion into individual simulation cells.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoints::{ServerMode, DEFAULT_MAX_DATAGRAM, DEFAULT_RESPONSE_BYTES};
use crate::netem::{ContentSelector, Direction, LossRule, Selector, DEFAULT_BANDWIDTH_BPS};
use crate::profiles::{ImplementationProfile, ProfileRegistry};
use crate::sim::DEFAULT_LIMIT;
use crate::simulation::{RunConfig, SMALL_CERT_BYTES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// A single value or a list of values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> Grid<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            Grid::One(v) => vec![v.clone()],
            Grid::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRuleConfig {
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_applications: Option<u32>,
}

impl LossRuleConfig {
    fn to_rule(&self, field: &str) -> Result<LossRule, ConfigError> {
        let selector = match (&self.indices, &self.content) {
            (Some(ix), None) => {
                if ix.is_empty() {
                    return Err(invalid(format!("{field}.indices"), "must not be empty"));
                }
                if ix.contains(&0) {
                    return Err(invalid(format!("{field}.indices"), "indices start at 1"));
                }
                Selector::ByIndex(ix.iter().copied().collect())
            }
            (None, Some(name)) => {
                let sel: ContentSelector = name
                    .parse()
                    .map_err(|e| invalid(format!("{field}.content"), format!("{e}")))?;
                if sel.direction() != self.direction {
                    return Err(invalid(
                        format!("{field}.direction"),
                        format!("`{name}` only matches {:?} traffic", sel.direction()),
                    ));
                }
                Selector::ByContent(sel)
            }
            _ => {
                return Err(invalid(
                    field,
                    "exactly one of `indices` or `content` is required",
                ))
            }
        };
        Ok(LossRule {
            direction: self.direction,
            selector,
            max_applications: self.max_applications,
        })
    }
}

fn default_rtt() -> Grid<u64> {
    Grid::One(9_000)
}
fn default_delta_t() -> Grid<u64> {
    Grid::One(0)
}
fn default_cert() -> Grid<u64> {
    Grid::One(SMALL_CERT_BYTES)
}
fn default_modes() -> Grid<ServerMode> {
    Grid::Many(ServerMode::ALL.to_vec())
}
fn default_profiles() -> Grid<String> {
    Grid::One("quic-go".to_string())
}
fn default_bandwidth() -> u64 {
    DEFAULT_BANDWIDTH_BPS
}
fn default_repetitions() -> u32 {
    1
}
fn default_response() -> u64 {
    DEFAULT_RESPONSE_BYTES
}
fn default_server_pto() -> u64 {
    200_000
}
fn default_max_datagram() -> u64 {
    DEFAULT_MAX_DATAGRAM
}
fn default_limit() -> u64 {
    DEFAULT_LIMIT.as_micros()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_rtt")]
    pub rtt_us: Grid<u64>,
    #[serde(default = "default_delta_t")]
    pub delta_t_us: Grid<u64>,
    #[serde(default = "default_cert")]
    pub cert_bytes: Grid<u64>,
    #[serde(default = "default_modes")]
    pub modes: Grid<ServerMode>,
    #[serde(default = "default_profiles")]
    pub profiles: Grid<String>,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bits_per_s: u64,
    #[serde(default)]
    pub loss: Vec<LossRuleConfig>,
    #[serde(default)]
    pub pad_iack: bool,
    #[serde(default)]
    pub early_settings: bool,
    #[serde(default)]
    pub stack_delay_us: u64,
    #[serde(default)]
    pub stack_jitter_us: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_response")]
    pub response_bytes: u64,
    #[serde(default = "default_server_pto")]
    pub server_default_pto_us: u64,
    #[serde(default = "default_max_datagram")]
    pub max_datagram_size: u64,
    #[serde(default = "default_limit")]
    pub limit_us: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub custom_profiles: Vec<ImplementationProfile>,
}

/// One expanded grid point and repetition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub scenario_id: String,
    pub repetition: u32,
    pub run: RunConfig,
}

impl Cell {
    /// File stem for this run's trace.
    pub fn run_id(&self) -> String {
        format!("{}-r{}", self.scenario_id, self.repetition)
    }
}

pub fn scenario_id(name: &str, rtt_us: u64, dt_us: u64, cert: u64, mode: ServerMode, profile: &str) -> String {
    format!("{name}-rtt{rtt_us}-dt{dt_us}-c{cert}-{mode}-{profile}")
}

fn check_grid<T: Ord + Clone + std::fmt::Debug>(field: &str, values: &[T]) -> Result<(), ConfigError> {
    if values.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    let mut seen = BTreeSet::new();
    for v in values {
        if !seen.insert(v.clone()) {
            return Err(invalid(field, format!("duplicate value {v:?}")));
        }
    }
    Ok(())
}

impl ScenarioConfig {
    /// All fields at their defaults.
    pub fn new(name: &str) -> Self {
        ScenarioConfig {
            name: name.to_string(),
            rtt_us: default_rtt(),
            delta_t_us: default_delta_t(),
            cert_bytes: default_cert(),
            modes: default_modes(),
            profiles: default_profiles(),
            bandwidth_bits_per_s: default_bandwidth(),
            loss: Vec::new(),
            pad_iack: false,
            early_settings: false,
            stack_delay_us: 0,
            stack_jitter_us: 0,
            repetitions: default_repetitions(),
            seed: 0,
            response_bytes: default_response(),
            server_default_pto_us: default_server_pto(),
            max_datagram_size: default_max_datagram(),
            limit_us: default_limit(),
            custom_profiles: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Built-ins plus `custom_profiles`.
    pub fn registry(&self) -> Result<ProfileRegistry, ConfigError> {
        let mut reg = ProfileRegistry::builtin();
        for (i, p) in self.custom_profiles.iter().enumerate() {
            reg.register(p.clone())
                .map_err(|e| invalid(format!("custom_profiles[{i}]"), e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty file-name-safe string"));
        }
        let rtts = self.rtt_us.values();
        check_grid("rtt_us", &rtts)?;
        if rtts.contains(&0) {
            return Err(invalid("rtt_us", "must be positive"));
        }
        check_grid("delta_t_us", &self.delta_t_us.values())?;
        let certs = self.cert_bytes.values();
        check_grid("cert_bytes", &certs)?;
        if certs.contains(&0) {
            return Err(invalid("cert_bytes", "must be positive"));
        }
        check_grid("modes", &self.modes.values())?;
        check_grid("profiles", &self.profiles.values())?;
        if self.repetitions == 0 {
            return Err(invalid("repetitions", "must be at least 1"));
        }
        if self.max_datagram_size < 1200 {
            return Err(invalid("max_datagram_size", "must be at least 1200"));
        }
        if self.limit_us == 0 {
            return Err(invalid("limit_us", "must be positive"));
        }
        let reg = self.registry()?;
        for (i, name) in self.profiles.values().iter().enumerate() {
            if reg.lookup(name).is_err() {
                let field = match self.profiles {
                    Grid::One(_) => "profiles".to_string(),
                    Grid::Many(_) => format!("profiles[{i}]"),
                };
                return Err(invalid(field, format!("unknown profile `{name}`")));
            }
        }
        for (i, rule) in self.loss.iter().enumerate() {
            rule.to_rule(&format!("loss[{i}]"))?;
        }
        Ok(())
    }

    pub fn loss_rules(&self) -> Result<Vec<LossRule>, ConfigError> {
        self.loss
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_rule(&format!("loss[{i}]")))
            .collect()
    }

    /// Cross product in the order rtt, Δt, cert, mode, profile, repetition.
    /// Repetition `r` runs with seed `seed + r`.
    pub fn expand(&self) -> Result<Vec<Cell>, ConfigError> {
        self.validate()?;
        let reg = self.registry()?;
        let loss = self.loss_rules()?;
        let mut cells = Vec::new();
        for rtt in self.rtt_us.values() {
            for dt in self.delta_t_us.values() {
                for cert in self.cert_bytes.values() {
                    for mode in self.modes.values() {
                        for name in self.profiles.values() {
                            let profile = reg.lookup(&name).expect("validated").clone();
                            let id = scenario_id(&self.name, rtt, dt, cert, mode, &name);
                            for rep in 0..self.repetitions {
                                let mut run = RunConfig::new(rtt, dt, mode, profile.clone());
                                run.bandwidth_bits_per_s = self.bandwidth_bits_per_s;
                                run.cert_bytes = cert;
                                run.loss = loss.clone();
                                run.pad_iack = self.pad_iack;
                                run.early_settings = self.early_settings;
                                run.stack_delay_us = self.stack_delay_us;
                                run.stack_jitter_us = self.stack_jitter_us;
                                run.seed = self.seed.wrapping_add(rep as u64);
                                run.response_bytes = self.response_bytes;
                                run.server_default_pto_us = self.server_default_pto_us;
                                run.max_datagram_size = self.max_datagram_size;
                                run.limit_us = self.limit_us;
                                cells.push(Cell {
                                    scenario_id: id.clone(),
                                    repetition: rep,
                                    run,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            name = "g"
            rtt_us = [1000, 9000, 20000, 100000, 300000]
            delta_t_us = 4000
            "#,
        )
        .unwrap();
        let cells = cfg.expand().unwrap();
        assert_eq!(cells.len(), 10);
        let ids: BTreeSet<_> = cells.iter().map(|c| c.scenario_id.clone()).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(cells[0].scenario_id, "g-rtt1000-dt4000-c1212-iack-quic-go");
    }

    #[test]
    fn repetitions_get_distinct_seeds() {
        let cfg = ScenarioConfig::from_toml_str(
            "name = \"r\"\nmodes = \"wfc\"\nrepetitions = 3\nseed = 7\nstack_jitter_us = 50\n",
        )
        .unwrap();
        let cells = cfg.expand().unwrap();
        let seeds: Vec<u64> = cells.iter().map(|c| c.run.seed).collect();
        assert_eq!(seeds, vec![7, 8, 9]);
        assert_eq!(cells[2].run_id(), "r-rtt9000-dt0-c1212-wfc-quic-go-r2");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ScenarioConfig::from_toml_str("name = \"x\"\ndelta_t = 4\n").unwrap_err();
        assert!(err.to_string().contains("delta_t"), "{err}");
    }

    #[test]
    fn missing_profile_names_field() {
        let err =
            ScenarioConfig::from_toml_str("name = \"x\"\nprofiles = [\"neqo\", \"nope\"]\n").unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "profiles[1]"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn loss_rules_validated() {
        let ok = ScenarioConfig::from_toml_str(
            r#"
            name = "l"
            [[loss]]
            direction = "client_to_server"
            content = "entire_second_client_flight"
            "#,
        )
        .unwrap();
        assert_eq!(ok.loss_rules().unwrap().len(), 1);

        let bad = ScenarioConfig::from_toml_str(
            r#"
            name = "l"
            [[loss]]
            direction = "server_to_client"
            content = "entire_second_client_flight"
            "#,
        )
        .unwrap_err();
        assert!(matches!(bad, ConfigError::Invalid { ref field, .. } if field == "loss[0].direction"));

        let both = ScenarioConfig::from_toml_str(
            r#"
            name = "l"
            [[loss]]
            direction = "server_to_client"
            indices = [2]
            content = "remaining_first_server_flight"
            "#,
        )
        .unwrap_err();
        assert!(matches!(both, ConfigError::Invalid { ref field, .. } if field == "loss[0]"));
    }

    #[test]
    fn custom_profile_usable() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            name = "c"
            profiles = "slowpoke"
            [[custom_profiles]]
            name = "slowpoke"
            default_pto_us = 1000000
            second_flight_datagrams = [2, 3]
            quirks = ["no_probe_on_iack"]
            "#,
        )
        .unwrap();
        let cells = cfg.expand().unwrap();
        assert_eq!(cells[0].run.profile.default_pto_us, 1_000_000);
    }

    #[test]
    fn duplicate_grid_values_rejected() {
        let err = ScenarioConfig::from_toml_str("name = \"d\"\nrtt_us = [9000, 9000]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "rtt_us"));
    }

    #[test]
    fn new_matches_minimal_file() {
        assert_eq!(ScenarioConfig::new("m"), ScenarioConfig::from_toml_str("name = \"m\"").unwrap());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::from_toml_str("name = \"t\"\nrtt_us = [1000, 2000]\n").unwrap();
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }
}
