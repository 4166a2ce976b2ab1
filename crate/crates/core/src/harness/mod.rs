//! Experiment harness: configs, scenario runners, statistics, and reports.

pub mod condition;
pub mod config;
pub mod report;
pub mod sample;
pub mod stats;
pub mod sweep;
pub mod theorem;
pub mod vrs;

use std::fmt;
use std::str::FromStr;

pub use condition::run_condition_check;
pub use config::{config_hash, ExperimentConfig};
pub use report::{write_reports, Check, Metric, Provenance, RunReport};
pub use sample::run_sample;
pub use stats::{energy_distance, energy_distance_1d};
pub use sweep::run_sweep_s;
pub use theorem::run_validate_theorem;
pub use vrs::run_ablate_vrs;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    ValidateTheorem,
    Sample,
    AblateVrs,
    SweepS,
    ConditionCheck,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::ValidateTheorem,
        Scenario::Sample,
        Scenario::AblateVrs,
        Scenario::SweepS,
        Scenario::ConditionCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ValidateTheorem => "validate-theorem",
            Scenario::Sample => "sample",
            Scenario::AblateVrs => "ablate-vrs",
            Scenario::SweepS => "sweep-s",
            Scenario::ConditionCheck => "condition-check",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario {s}")))
    }
}

/// A config together with the hash that goes into report provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl LoadedConfig {
    /// Hash of the file bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            config: ExperimentConfig::from_toml_str(text)?,
            hash: config_hash(bytes),
        })
    }

    /// Built-in defaults, hashed through their TOML rendering.
    pub fn defaults() -> Self {
        let config = ExperimentConfig::default();
        let hash = config_hash(config.to_toml_string().as_bytes());
        Self { config, hash }
    }
}

pub fn run_scenario(scenario: Scenario, cfg: &LoadedConfig, seed: u64, snapshots: bool) -> Result<RunReport> {
    let prov = Provenance::new(cfg.hash.clone(), seed);
    let c = &cfg.config;
    match scenario {
        Scenario::ValidateTheorem => run_validate_theorem(c, seed, prov),
        Scenario::Sample => run_sample(c, seed, prov, snapshots),
        Scenario::AblateVrs => run_ablate_vrs(c, seed, prov, snapshots),
        Scenario::SweepS => run_sweep_s(c, seed, prov),
        Scenario::ConditionCheck => run_condition_check(c, seed, prov),
    }
}

/// Every scenario in a fixed order.
pub fn run_all(cfg: &LoadedConfig, seed: u64, snapshots: bool) -> Result<Vec<RunReport>> {
    Scenario::ALL
        .into_iter()
        .map(|s| run_scenario(s, cfg, seed, snapshots))
        .collect()
}
