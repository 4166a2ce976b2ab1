//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional and falls back to its default; unknown
//! keys are rejected. Pass/fail thresholds live here so they can be tuned
//! without recompiling.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::CompositionConfig;
use crate::error::{Error, Result};
use crate::models::{TreeFamily, Wiring};
use crate::schedule::ScheduleParams;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleParams,
    pub composition: CompositionConfig,
    pub theorem: TheoremConfig,
    pub vrs: VrsConfig,
    pub sweep: SweepConfig,
    pub condition: ConditionConfig,
    pub sample: SampleConfig,
}

/// Inclusive integer range `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::Config(format!("{what}: need 1 <= min <= max")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremConfig {
    pub n_models: usize,
    pub views: SizeRange,
    pub frames: SizeRange,
    pub entry_dims: Vec<usize>,
    pub n_points: usize,
    pub levels: Vec<f64>,
    pub family: TreeFamily,
    /// Wiring of the negative-control family.
    pub control_wiring: Wiring,
    /// Normalized error bound for pivot trees.
    pub tolerance: f64,
    /// Error bound for fully independent models.
    pub independent_tolerance: f64,
    /// A control pair counts as broken above this normalized error.
    pub control_threshold: f64,
    /// Minimum fraction of broken (model, level) pairs in the control family.
    pub control_fraction: f64,
    /// Noise level of the partial-covariance diagnostic.
    pub diagnostic_level: f64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            n_models: 20,
            views: SizeRange::new(2, 5),
            frames: SizeRange::new(2, 5),
            entry_dims: vec![1, 2, 3],
            n_points: 50,
            levels: vec![0.0, 0.5, 2.0, 10.0],
            family: TreeFamily::default(),
            control_wiring: Wiring::CrossLinked,
            tolerance: 1e-8,
            independent_tolerance: 1e-10,
            control_threshold: 1e-4,
            control_fraction: 0.9,
            diagnostic_level: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VrsConfig {
    pub views: usize,
    pub frames: usize,
    /// Row-model modes sit at `-mode_offset` and `+mode_offset` on every coordinate.
    pub mode_offset: f64,
    pub component_std: f64,
    /// Shift of the column-model modes in the mismatched pair.
    pub delta: f64,
    /// Shift used by the matched control.
    pub control_delta: f64,
    /// Rolled-back steps in the rollback arm; the other arm uses none.
    pub n_rollback: usize,
    pub n_seeds: usize,
    pub n_bootstrap: usize,
    /// Two-sided level of the bootstrap interval for the mismatched pair.
    pub ci_level: f64,
    /// Two-sided level of the interval that must contain 0 for the control.
    pub control_ci_level: f64,
    /// Step whose predictions feed the bimodality diagnostic.
    pub bimodality_step: usize,
    pub bimodality_threshold: f64,
}

impl Default for VrsConfig {
    fn default() -> Self {
        Self {
            views: 3,
            frames: 3,
            mode_offset: 3.0,
            component_std: 0.5,
            delta: 1.0,
            control_delta: 0.0,
            n_rollback: 5,
            n_seeds: 2000,
            n_bootstrap: 2000,
            ci_level: 0.95,
            control_ci_level: 0.99,
            bimodality_step: 4,
            bimodality_threshold: 5.0 / 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub views: usize,
    pub frames: usize,
    pub entry_dim: usize,
    pub s_grid: Vec<f64>,
    pub levels: Vec<f64>,
    pub n_models: usize,
    pub n_points: usize,
    pub family: TreeFamily,
    /// Bound on the independent-model error and on the orientation-swap gap.
    pub tolerance: f64,
    /// The correlated-model error at `s = 0.5` must exceed this.
    pub min_correlated_error: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            views: 3,
            frames: 3,
            entry_dim: 2,
            s_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            levels: vec![0.5, 2.0, 10.0],
            n_models: 5,
            n_points: 20,
            family: TreeFamily::default(),
            tolerance: 1e-10,
            min_correlated_error: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionConfig {
    pub views: usize,
    pub frames: usize,
    pub entry_dim: usize,
    pub family: TreeFamily,
    /// Runs checked for bit-exact preservation.
    pub n_runs: usize,
    /// Runs per arm of the unconditioned-vs-reference energy test.
    pub n_samples: usize,
    pub n_permutations: usize,
    pub alpha: f64,
    /// Runs used to estimate the pivot-to-interior correlation.
    pub n_coupling_runs: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            views: 3,
            frames: 3,
            entry_dim: 1,
            family: TreeFamily {
                coeff_scale: 2.0,
                innovation_floor: 0.05,
                positive: true,
                wiring: Wiring::Tree,
            },
            n_runs: 100,
            n_samples: 400,
            n_permutations: 400,
            alpha: 0.01,
            n_coupling_runs: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub views: usize,
    pub frames: usize,
    pub entry_dim: usize,
    pub family: TreeFamily,
    pub n_samples: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            views: 3,
            frames: 4,
            entry_dim: 2,
            family: TreeFamily::default(),
            n_samples: 200,
        }
    }
}

fn positive(v: usize, what: &str) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

fn unit_open(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must lie in (0, 1)")))
    }
}

fn levels_ok(levels: &[f64], what: &str) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Config(format!("{what} must be a non-empty list of finite levels >= 0")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, returning it with its raw bytes.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(e.to_string()))?;
        Ok((Self::from_toml_str(text)?, bytes))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        self.composition
            .validate(schedule.n_steps())
            .map_err(|e| Error::Config(format!("composition: {e}")))?;

        let t = &self.theorem;
        positive(t.n_models, "theorem.n_models")?;
        positive(t.n_points, "theorem.n_points")?;
        t.views.validate("theorem.views")?;
        t.frames.validate("theorem.frames")?;
        if t.entry_dims.is_empty() || t.entry_dims.contains(&0) {
            return Err(Error::Config("theorem.entry_dims must be non-empty and positive".into()));
        }
        levels_ok(&t.levels, "theorem.levels")?;
        unit_open(t.control_fraction, "theorem.control_fraction")?;

        let v = &self.vrs;
        positive(v.views, "vrs.views")?;
        positive(v.frames, "vrs.frames")?;
        if !(v.component_std > 0.0) {
            return Err(Error::Config("vrs.component_std must be positive".into()));
        }
        if v.n_seeds < 2 || v.n_bootstrap == 0 {
            return Err(Error::Config("vrs needs at least 2 seeds and 1 bootstrap draw".into()));
        }
        unit_open(v.ci_level, "vrs.ci_level")?;
        unit_open(v.control_ci_level, "vrs.control_ci_level")?;
        if v.n_rollback > schedule.n_steps() {
            return Err(Error::Config("vrs.n_rollback exceeds the number of steps".into()));
        }
        if v.bimodality_step >= schedule.n_steps() {
            return Err(Error::Config("vrs.bimodality_step is past the last step".into()));
        }

        let s = &self.sweep;
        positive(s.views, "sweep.views")?;
        positive(s.frames, "sweep.frames")?;
        positive(s.entry_dim, "sweep.entry_dim")?;
        positive(s.n_models, "sweep.n_models")?;
        positive(s.n_points, "sweep.n_points")?;
        levels_ok(&s.levels, "sweep.levels")?;
        if s.s_grid.is_empty() || s.s_grid.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Config("sweep.s_grid must be a non-empty list in [0, 1]".into()));
        }

        let c = &self.condition;
        positive(c.views, "condition.views")?;
        positive(c.frames, "condition.frames")?;
        positive(c.entry_dim, "condition.entry_dim")?;
        positive(c.n_runs, "condition.n_runs")?;
        positive(c.n_permutations, "condition.n_permutations")?;
        if c.n_samples < 2 || c.n_coupling_runs < 3 {
            return Err(Error::Config("condition needs at least 2 samples and 3 coupling runs".into()));
        }
        unit_open(c.alpha, "condition.alpha")?;

        let p = &self.sample;
        positive(p.views, "sample.views")?;
        positive(p.frames, "sample.frames")?;
        positive(p.entry_dim, "sample.entry_dim")?;
        if p.n_samples < 2 {
            return Err(Error::Config("sample.n_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.schedule.n_steps, 50);
        assert_eq!(c.composition.n_rollback, 5);
        assert_eq!(c.theorem.levels, vec![0.0, 0.5, 2.0, 10.0]);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[schedule]\nsteps = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[vrs]\nviews = 2\nextra = true").is_err());
        assert!(ExperimentConfig::from_toml_str("[theorem.family]\nwiring = \"sideways\"").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = ExperimentConfig::from_toml_str("[vrs]\nn_seeds = 10\n[composition.scale]\nkind = \"constant\"\nvalue = 0.25").unwrap();
        assert_eq!(c.vrs.n_seeds, 10);
        assert_eq!(c.vrs.views, 3);
        assert_eq!(c.composition.scale.value(0), 0.25);
    }

    #[test]
    fn inconsistent_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[composition]\nn_rollback = 60").is_err());
        assert!(ExperimentConfig::from_toml_str("[theorem.views]\nmin = 4\nmax = 2").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\ns_grid = [0.5, 1.5]").is_err());
        assert!(ExperimentConfig::from_toml_str("[vrs]\nbimodality_step = 50").is_err());
    }

    #[test]
    fn hash_tracks_bytes() {
        let a = config_hash(b"[vrs]\nn_seeds = 10\n");
        assert_eq!(a, config_hash(b"[vrs]\nn_seeds = 10\n"));
        assert_ne!(a, config_hash(b"[vrs]\nn_seeds = 11\n"));
        assert_eq!(config_hash(b"").len(), 64);
        assert_eq!(
            config_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
