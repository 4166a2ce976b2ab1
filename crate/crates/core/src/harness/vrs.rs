//! Rollback ablation on a mismatched pair of two-mode mixtures.
//!
//! Every row is scored by a mixture with modes at `-a` and `+a` on all
//! coordinates and every column by one with modes at `-a + delta` and
//! `+a + delta`. The consensus modes are the midpoints `+-a + delta / 2`
//! repeated over the whole matrix. A sample that mixes the row and column
//! decisions lands away from both. Each seed is run with and without
//! rollback on the same initial noise.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::{ExperimentConfig, VrsConfig};
use super::report::{Check, Provenance, RunReport, SnapshotSet};
use super::stats::{bimodality_coefficient, bootstrap_mean_ci, mean};
use crate::compose::{CompositionConfig, ConditionSet, LatentMatrix, LineDenoisers};
use crate::denoise::{denoiser_from_gmm, GmmDenoiser};
use crate::error::Result;
use crate::models::{GaussianModel, GmmModel, MatrixLayout};
use crate::rng::{Purpose, SeedStreams, StreamKey};
use crate::sampler::{sample_matrix, MatrixDenoisers, SamplerOptions, SamplerRun, StepRecord};
use crate::schedule::SigmaSchedule;

/// Equal-weight two-mode mixture on `dim` coordinates.
pub fn two_mode_gmm(dim: usize, offset: f64, shift: f64, std: f64) -> Result<GmmModel> {
    let comp = |m: f64| GaussianModel::from_parts(vec![m; dim], DMatrix::identity(dim, dim) * (std * std));
    GmmModel::new(vec![0.5, 0.5], vec![comp(shift - offset)?, comp(shift + offset)?])
}

/// RMS distance of `x` to the nearer of the two consensus matrices.
pub fn consensus_distance(x: &LatentMatrix, offset: f64, delta: f64) -> f64 {
    let v = x.as_slice();
    let rms = |c: f64| (v.iter().map(|y| (y - c) * (y - c)).sum::<f64>() / v.len() as f64).sqrt();
    rms(delta / 2.0 - offset).min(rms(delta / 2.0 + offset))
}

struct Arm {
    distance: f64,
    /// Row-minus-column predictions per step, from the last pass of each step.
    disagreement: Vec<Vec<f64>>,
    run: SamplerRun,
}

fn run_arm(
    layout: MatrixLayout,
    rows: &GmmDenoiser,
    cols: &GmmDenoiser,
    schedule: &SigmaSchedule,
    config: &CompositionConfig,
    v: &VrsConfig,
    delta: f64,
    seed: u64,
    keep_snapshots: bool,
) -> Result<Arm> {
    let den = MatrixDenoisers::convex(LineDenoisers::Shared(rows), LineDenoisers::Shared(cols));
    let (x, mut run) = sample_matrix(
        layout,
        &den,
        schedule,
        config,
        &ConditionSet::new(),
        seed,
        SamplerOptions { snapshots: true },
    )?;
    let mut disagreement = vec![Vec::new(); schedule.n_steps()];
    for s in &run.snapshots {
        disagreement[s.step] = s
            .row_prediction
            .as_slice()
            .iter()
            .zip(s.col_prediction.as_slice())
            .map(|(r, c)| r - c)
            .collect();
    }
    if !keep_snapshots {
        run.snapshots.clear();
    }
    Ok(Arm {
        distance: consensus_distance(&x, v.mode_offset, delta),
        disagreement,
        run,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaSummary {
    pub delta: f64,
    pub mean_distance_without: f64,
    pub mean_distance_with: f64,
    pub mean_difference: f64,
    pub ci: (f64, f64),
    pub ci_level: f64,
    pub ghost_fraction_without: f64,
    pub ghost_fraction_with: f64,
    /// Bimodality coefficient of pooled row-minus-column predictions per step.
    pub bimodality_without: Vec<f64>,
    pub bimodality_with: Vec<f64>,
}

struct DeltaRun {
    summary: DeltaSummary,
    steps: Vec<StepRecord>,
    snapshots: Vec<SnapshotSet>,
}

fn pooled_bimodality(arms: &[Arm], step: usize) -> f64 {
    let pooled: Vec<f64> = arms.iter().flat_map(|a| a.disagreement[step].iter().copied()).collect();
    // constant predictions carry no shape information
    bimodality_coefficient(&pooled).unwrap_or(0.0)
}

fn run_delta(
    cfg: &ExperimentConfig,
    delta: f64,
    ci_level: f64,
    seed: u64,
    tag: u64,
    snapshots: bool,
) -> Result<DeltaRun> {
    let v = &cfg.vrs;
    let layout = MatrixLayout::new(v.views, v.frames, 1)?;
    let rows = denoiser_from_gmm(two_mode_gmm(v.frames, v.mode_offset, 0.0, v.component_std)?);
    let cols = denoiser_from_gmm(two_mode_gmm(v.views, v.mode_offset, delta, v.component_std)?);
    let schedule = cfg.schedule.build()?;
    let without = CompositionConfig {
        n_rollback: 0,
        ..cfg.composition.clone()
    };
    let with = CompositionConfig {
        n_rollback: v.n_rollback,
        ..cfg.composition.clone()
    };
    let root = SeedStreams::new(seed).child(tag);
    let pairs: Vec<(Arm, Arm)> = (0..v.n_seeds)
        .into_par_iter()
        .map(|k| {
            let s = root.child(k as u64).seed();
            let keep = snapshots && k == 0;
            let a = run_arm(layout, &rows, &cols, &schedule, &without, v, delta, s, keep)?;
            let b = run_arm(layout, &rows, &cols, &schedule, &with, v, delta, s, keep)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| b.distance - a.distance).collect();
    let mut rng = root.stream(StreamKey::new(Purpose::Statistic));
    let ci = bootstrap_mean_ci(&diffs, ci_level, v.n_bootstrap, &mut rng)?;
    let (without_arms, with_arms): (Vec<Arm>, Vec<Arm>) = pairs.into_iter().unzip();
    let ghost = |arms: &[Arm]| {
        arms.iter().filter(|a| a.distance > v.mode_offset / 2.0).count() as f64 / arms.len() as f64
    };
    let n = schedule.n_steps();
    let summary = DeltaSummary {
        delta,
        mean_distance_without: mean(&without_arms.iter().map(|a| a.distance).collect::<Vec<_>>()),
        mean_distance_with: mean(&with_arms.iter().map(|a| a.distance).collect::<Vec<_>>()),
        mean_difference: mean(&diffs),
        ci,
        ci_level,
        ghost_fraction_without: ghost(&without_arms),
        ghost_fraction_with: ghost(&with_arms),
        bimodality_without: (0..n).map(|i| pooled_bimodality(&without_arms, i)).collect(),
        bimodality_with: (0..n).map(|i| pooled_bimodality(&with_arms, i)).collect(),
    };
    let mut sets = Vec::new();
    if snapshots {
        let name = |arm: &str| format!("ablate-vrs_delta_{delta}_{arm}_seed0");
        sets.push(SnapshotSet {
            name: name("without"),
            snapshots: without_arms[0].run.snapshots.clone(),
        });
        sets.push(SnapshotSet {
            name: name("with"),
            snapshots: with_arms[0].run.snapshots.clone(),
        });
    }
    Ok(DeltaRun {
        summary,
        steps: with_arms[0].run.steps.clone(),
        snapshots: sets,
    })
}

pub fn run_ablate_vrs(cfg: &ExperimentConfig, seed: u64, provenance: Provenance, snapshots: bool) -> Result<RunReport> {
    let v = &cfg.vrs;
    let mut report = RunReport::new("ablate-vrs", provenance);
    let mismatched = run_delta(cfg, v.delta, v.ci_level, seed, 0, snapshots)?;
    let control = run_delta(cfg, v.control_delta, v.control_ci_level, seed, 1, snapshots)?;

    let m = &mismatched.summary;
    report.info("mismatched_mean_distance_without", m.mean_distance_without)?;
    report.info("mismatched_mean_distance_with", m.mean_distance_with)?;
    report.info("mismatched_mean_difference", m.mean_difference)?;
    report.info("mismatched_ci_low", m.ci.0)?;
    report.push("mismatched_ci_high", m.ci.1, Check::Lt(0.0))?;
    report.info("mismatched_ghost_fraction_without", m.ghost_fraction_without)?;
    report.info("mismatched_ghost_fraction_with", m.ghost_fraction_with)?;

    let c = &control.summary;
    report.info("control_mean_distance_without", c.mean_distance_without)?;
    report.info("control_mean_distance_with", c.mean_distance_with)?;
    report.info("control_mean_difference", c.mean_difference)?;
    report.push("control_ci_low", c.ci.0, Check::Le(0.0))?;
    report.push("control_ci_high", c.ci.1, Check::Ge(0.0))?;
    report.info("control_ghost_fraction_without", c.ghost_fraction_without)?;
    report.info("control_ghost_fraction_with", c.ghost_fraction_with)?;

    let b = v.bimodality_step;
    report.info(&format!("mismatched_bimodality_step_{b}_without"), m.bimodality_without[b])?;
    report.info(&format!("mismatched_bimodality_step_{b}_with"), m.bimodality_with[b])?;
    report.info("bimodality_threshold", v.bimodality_threshold)?;

    report.steps = mismatched.steps;
    report.snapshots = mismatched.snapshots.into_iter().chain(control.snapshots).collect();
    report.details = json!({
        "mismatched": m,
        "control": c,
    });
    Ok(report)
}
