//! Composed-versus-joint score checks on random pivot-rooted models.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::config::{ExperimentConfig, TheoremConfig};
use super::report::{Check, Provenance, RunReport};
use crate::compose::compose_scores_exact;
use crate::denoise::{denoiser_from_gaussian, score_of};
use crate::error::{Error, Result};
use crate::models::{
    build_pivot_tree, random_pivot_tree, Entry, GaussianModel, MatrixGaussianModel, MatrixLayout, PivotTreeSpec,
    TreeFamily, Wiring,
};
use crate::rng::{Purpose, SeedStreams, StreamKey};

/// A model whose noised distribution at `sigma` has a prescribed covariance.
pub struct LevelModel {
    pub clean: MatrixGaussianModel,
    pub noised: MatrixGaussianModel,
    pub sigma: f64,
}

/// Rescales `structure` so that it is the noised distribution at `sigma`
/// of a valid clean model: noised = c * structure, clean = noised - sigma^2 I,
/// with `c` large enough that the clean covariance stays positive definite.
/// Scaling preserves every conditional-independence relation of `structure`.
pub fn model_at_level(structure: &MatrixGaussianModel, sigma: f64) -> Result<LevelModel> {
    if sigma == 0.0 {
        return Ok(LevelModel {
            clean: structure.clone(),
            noised: structure.clone(),
            sigma,
        });
    }
    let cov = structure.joint().covariance();
    let lambda_min = cov.clone().symmetric_eigen().eigenvalues.min();
    if !(lambda_min > 0.0) {
        return Err(Error::DegenerateModel("structure covariance is not positive definite".into()));
    }
    let c = (2.0 * sigma * sigma / lambda_min).max(1.0);
    let n = cov.nrows();
    let noised_cov = cov * c;
    let clean_cov = &noised_cov - DMatrix::identity(n, n) * (sigma * sigma);
    let layout = structure.layout();
    let mean = structure.joint().mean().clone();
    Ok(LevelModel {
        clean: MatrixGaussianModel::new(layout, GaussianModel::new(mean.clone(), clean_cov)?)?,
        noised: MatrixGaussianModel::new(layout, GaussianModel::new(mean, noised_cov)?)?,
        sigma,
    })
}

fn pick(layout: MatrixLayout, x: &[f64], entries: &[Entry]) -> Vec<f64> {
    layout.coords_of(entries).iter().map(|&c| x[c]).collect()
}

/// Score of a marginal of the clean model at noise `sigma`, through its
/// denoiser for `sigma > 0` and directly at `sigma = 0`.
pub(crate) fn marginal_score(marginal: GaussianModel, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        marginal.score(x)
    } else {
        score_of(&denoiser_from_gaussian(marginal), x, sigma)
    }
}

/// Row + column - entry composed score at `e`.
pub fn composed_score_at(m: &LevelModel, x: &[f64], e: Entry) -> Result<Vec<f64>> {
    let l = m.clean.layout();
    let d = l.entry_dim;
    let row = marginal_score(m.clean.row_marginal(e.0)?, &pick(l, x, &l.row_entries(e.0)), m.sigma)?;
    let col = marginal_score(m.clean.col_marginal(e.1)?, &pick(l, x, &l.col_entries(e.1)), m.sigma)?;
    let ent = marginal_score(m.clean.entry_marginal(e)?, &pick(l, x, &[e]), m.sigma)?;
    compose_scores_exact(&row[e.1 * d..(e.1 + 1) * d], &col[e.0 * d..(e.0 + 1) * d], &ent)
}

/// `max |composed - joint| / (1 + max |joint|)` at `e`, the joint score
/// coming straight from the noised model.
pub fn normalized_error(m: &LevelModel, x: &[f64], e: Entry) -> Result<f64> {
    let l = m.clean.layout();
    let joint = m.noised.joint().score(x)?;
    let composed = composed_score_at(m, x, e)?;
    let truth: Vec<f64> = l.coords(e).map(|c| joint[c]).collect();
    let err = composed.iter().zip(&truth).fold(0.0f64, |a, (c, t)| a.max((c - t).abs()));
    let scale = truth.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    Ok(err / (1.0 + scale))
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelRecord {
    pub family: String,
    pub index: usize,
    pub views: usize,
    pub frames: usize,
    pub entry_dim: usize,
    pub pivot: Entry,
    /// Maximum normalized error per configured level.
    pub errors: Vec<f64>,
    pub skipped: Option<String>,
}

fn draw_shape(t: &TheoremConfig, rng: &mut ChaCha8Rng) -> (MatrixLayout, Entry) {
    let v = rng.random_range(t.views.min..=t.views.max);
    let f = rng.random_range(t.frames.min..=t.frames.max);
    let d = t.entry_dims[rng.random_range(0..t.entry_dims.len())];
    let layout = MatrixLayout::new(v, f, d).expect("positive sizes");
    let pivot = (rng.random_range(0..v), rng.random_range(0..f));
    (layout, pivot)
}

fn zero_couplings(spec: &mut PivotTreeSpec) {
    for m in spec.row_coeffs.iter_mut().chain(&mut spec.col_coeffs).chain(&mut spec.rest_coeffs) {
        m.fill(0.0);
    }
    spec.extra_edges.clear();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Tree,
    Independent,
    Control,
    BothAnchors,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Tree => "tree",
            Family::Independent => "independent",
            Family::Control => "control",
            Family::BothAnchors => "both-anchors",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Family::Tree => 0,
            Family::Independent => 1,
            Family::Control => 2,
            Family::BothAnchors => 3,
        }
    }
}

fn evaluate_model(t: &TheoremConfig, family: Family, index: usize, streams: &SeedStreams) -> ModelRecord {
    let mut rng = streams.stream(StreamKey::new(Purpose::Model).step(index, 0));
    let (layout, pivot) = draw_shape(t, &mut rng);
    let mut record = ModelRecord {
        family: family.name().to_string(),
        index,
        views: layout.views,
        frames: layout.frames,
        entry_dim: layout.entry_dim,
        pivot,
        errors: Vec::new(),
        skipped: None,
    };
    let tree_family = match family {
        Family::Control => TreeFamily {
            wiring: t.control_wiring,
            ..t.family
        },
        Family::BothAnchors => TreeFamily {
            wiring: Wiring::BothAnchors,
            ..t.family
        },
        _ => t.family,
    };
    let outcome = (|| -> Result<Vec<f64>> {
        let mut spec = random_pivot_tree(layout, pivot, &tree_family, &mut rng)?;
        if family == Family::Independent {
            zero_couplings(&mut spec);
        }
        let structure = build_pivot_tree(&spec)?;
        let targets: Vec<Entry> = if family == Family::Independent {
            layout.entries().collect()
        } else {
            vec![pivot]
        };
        let mut errors = Vec::with_capacity(t.levels.len());
        for (li, &sigma) in t.levels.iter().enumerate() {
            let m = if family == Family::Independent {
                // independence survives isotropic noise as is
                LevelModel {
                    clean: structure.clone(),
                    noised: structure.noised(sigma)?,
                    sigma,
                }
            } else {
                model_at_level(&structure, sigma)?
            };
            let mut prng = streams.stream(StreamKey::new(Purpose::Statistic).step(index, li));
            let mut worst = 0.0f64;
            for _ in 0..t.n_points {
                let x = m.noised.joint().sample(&mut prng);
                for &e in &targets {
                    worst = worst.max(normalized_error(&m, &x, e)?);
                }
            }
            errors.push(worst);
        }
        Ok(errors)
    })();
    match outcome {
        Ok(errors) => record.errors = errors,
        Err(e) => record.skipped = Some(e.to_string()),
    }
    record
}

/// Evaluates `n_models` usable models of a family, recording skips for
/// degenerate draws (at most ten times as many attempts).
fn run_family(t: &TheoremConfig, family: Family, seed: u64) -> Vec<ModelRecord> {
    use rayon::prelude::*;
    let streams = SeedStreams::new(seed).child(family.tag());
    let mut records = Vec::new();
    let mut next = 0;
    let limit = 10 * t.n_models;
    while records.iter().filter(|r: &&ModelRecord| r.skipped.is_none()).count() < t.n_models && next < limit {
        let missing = t.n_models - records.iter().filter(|r: &&ModelRecord| r.skipped.is_none()).count();
        let batch: Vec<ModelRecord> = (next..next + missing)
            .into_par_iter()
            .map(|k| evaluate_model(t, family, k, &streams))
            .collect();
        next += missing;
        records.extend(batch);
    }
    records
}

fn usable(records: &[ModelRecord]) -> impl Iterator<Item = &ModelRecord> {
    records.iter().filter(|r| r.skipped.is_none())
}

fn max_error(records: &[ModelRecord]) -> f64 {
    usable(records).flat_map(|r| r.errors.iter().copied()).fold(0.0, f64::max)
}

/// Largest `|Cov(row entry, column entry | pivot)|` of the clean tree after
/// adding noise at `sigma`, over models and entry pairs.
fn partial_covariance_gap(t: &TheoremConfig, seed: u64, sigma: f64) -> Result<f64> {
    let streams = SeedStreams::new(seed).child(Family::Tree.tag());
    let mut worst = 0.0f64;
    for k in 0..t.n_models {
        let mut rng = streams.stream(StreamKey::new(Purpose::Model).step(k, 0));
        let (layout, pivot) = draw_shape(t, &mut rng);
        let Ok(m) = random_pivot_tree(layout, pivot, &t.family, &mut rng).and_then(|s| build_pivot_tree(&s)) else {
            continue;
        };
        let m = m.noised(sigma)?;
        let (i0, j0) = pivot;
        for j in (0..layout.frames).filter(|&j| j != j0) {
            for i in (0..layout.views).filter(|&i| i != i0) {
                let pc = m.partial_covariance((i0, j), (i, j0), pivot)?;
                worst = worst.max(pc.amax());
            }
        }
    }
    Ok(worst)
}

pub fn run_validate_theorem(cfg: &ExperimentConfig, seed: u64, provenance: Provenance) -> Result<RunReport> {
    let t = &cfg.theorem;
    let mut report = RunReport::new("validate-theorem", provenance);

    let trees = run_family(t, Family::Tree, seed);
    let independent = run_family(t, Family::Independent, seed);
    let control = run_family(t, Family::Control, seed);
    let both = run_family(t, Family::BothAnchors, seed);

    let n_tree = usable(&trees).count();
    report.push("tree_models_evaluated", n_tree as f64, Check::Ge(t.n_models as f64))?;
    report.info("tree_models_skipped", (trees.len() - n_tree) as f64)?;
    report.push("tree_max_error", max_error(&trees), Check::Le(t.tolerance))?;
    for (li, sigma) in t.levels.iter().enumerate() {
        let at = usable(&trees).map(|r| r.errors[li]).fold(0.0, f64::max);
        report.info(&format!("tree_max_error_sigma_{sigma}"), at)?;
    }
    report.push(
        "independent_max_error",
        max_error(&independent),
        Check::Le(t.independent_tolerance),
    )?;

    let pairs: Vec<f64> = usable(&control).flat_map(|r| r.errors.iter().copied()).collect();
    let broken_models = usable(&control)
        .filter(|r| r.errors.iter().all(|&e| e > t.control_threshold))
        .count();
    let n_control = usable(&control).count();
    report.push("control_models_evaluated", n_control as f64, Check::Ge(t.n_models as f64))?;
    let frac_pairs = pairs.iter().filter(|&&e| e > t.control_threshold).count() as f64 / pairs.len().max(1) as f64;
    // a model counts as broken only if it is broken at every tested level
    report.push(
        "control_broken_fraction",
        broken_models as f64 / n_control.max(1) as f64,
        Check::Ge(t.control_fraction),
    )?;
    report.info("control_broken_pair_fraction", frac_pairs)?;
    report.info(
        "control_min_error",
        pairs.iter().copied().fold(f64::INFINITY, f64::min).min(f64::MAX),
    )?;
    report.info("both_anchors_max_error", max_error(&both))?;
    report.push(
        "clean_partial_covariance",
        partial_covariance_gap(t, seed, 0.0)?,
        Check::Le(t.tolerance),
    )?;
    report.info(
        &format!("noised_partial_covariance_sigma_{}", t.diagnostic_level),
        partial_covariance_gap(t, seed, t.diagnostic_level)?,
    )?;

    report.details = json!({
        "levels": t.levels,
        "tree": trees,
        "independent": independent,
        "control": control,
        "both_anchors": both,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_model_keeps_structure() {
        let mut rng = SeedStreams::new(3).stream(StreamKey::new(Purpose::Model));
        let layout = MatrixLayout::new(3, 3, 2).unwrap();
        let spec = random_pivot_tree(layout, (1, 1), &TreeFamily::default(), &mut rng).unwrap();
        let s = build_pivot_tree(&spec).unwrap();
        let m = model_at_level(&s, 2.0).unwrap();
        let back = m.clean.noised(2.0).unwrap();
        let diff = (back.joint().covariance() - m.noised.joint().covariance()).amax();
        assert!(diff < 1e-9);
        let pc = m.noised.partial_covariance((1, 0), (0, 1), (1, 1)).unwrap();
        assert!(pc.amax() < 1e-9);
        let x = m.noised.joint().sample(&mut rng);
        assert!(normalized_error(&m, &x, (1, 1)).unwrap() < 1e-8);
    }

    #[test]
    fn small_run_passes() {
        let mut cfg = ExperimentConfig::default();
        cfg.theorem.n_models = 3;
        cfg.theorem.n_points = 5;
        let r = run_validate_theorem(&cfg, 11, Provenance::new("x".into(), 11)).unwrap();
        assert!(r.passed(), "{:?}", r.failures());
    }
}
