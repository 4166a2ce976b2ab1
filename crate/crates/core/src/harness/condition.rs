//! Conditioning checks: exact preservation, neutrality of an empty
//! condition set, and the pull of known entries on the rest of the matrix.

use rayon::prelude::*;
use serde_json::json;

use super::config::ExperimentConfig;
use super::report::{Check, Provenance, RunReport};
use super::stats::{correlation, energy_permutation_test};
use crate::compose::{ConditionSet, LatentMatrix, LineDenoisers};
use crate::denoise::{denoiser_from_gaussian, Denoiser, GaussianDenoiser};
use crate::error::{Error, Result};
use crate::models::{build_pivot_tree, random_pivot_tree, Entry, MatrixGaussianModel, MatrixLayout};
use crate::rng::{Purpose, SeedStreams, StreamKey};
use crate::sampler::{sample_matrix, MatrixDenoisers, SamplerOptions};

/// Exact row and column marginal denoisers of a matrix model.
pub struct OracleLines {
    pub rows: Vec<GaussianDenoiser>,
    pub cols: Vec<GaussianDenoiser>,
}

impl OracleLines {
    pub fn new(m: &MatrixGaussianModel) -> Result<Self> {
        let l = m.layout();
        Ok(Self {
            rows: (0..l.views)
                .map(|i| Ok(denoiser_from_gaussian(m.row_marginal(i)?)))
                .collect::<Result<_>>()?,
            cols: (0..l.frames)
                .map(|j| Ok(denoiser_from_gaussian(m.col_marginal(j)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn denoisers(&self) -> MatrixDenoisers<'_> {
        MatrixDenoisers::convex(per_line(&self.rows), per_line(&self.cols))
    }
}

fn per_line(ds: &[GaussianDenoiser]) -> LineDenoisers<'_> {
    LineDenoisers::PerLine(ds.iter().map(|d| d as &dyn Denoiser).collect())
}

fn first_row_and_column(layout: MatrixLayout) -> Vec<Entry> {
    layout.entries().filter(|e| e.0 == 0 || e.1 == 0).collect()
}

fn conditions_from(layout: MatrixLayout, draw: &[f64], entries: &[Entry]) -> ConditionSet {
    entries
        .iter()
        .map(|&e| (e, layout.coords(e).map(|c| draw[c]).collect()))
        .collect()
}

fn preserved(x: &LatentMatrix, conds: &ConditionSet) -> bool {
    conds.iter().all(|(e, v)| x.entry(e) == v)
}

pub fn run_condition_check(cfg: &ExperimentConfig, seed: u64, provenance: Provenance) -> Result<RunReport> {
    let c = &cfg.condition;
    let mut report = RunReport::new("condition-check", provenance);
    let layout = MatrixLayout::new(c.views, c.frames, c.entry_dim)?;
    if c.views < 2 || c.frames < 2 {
        return Err(Error::Config("condition check needs at least a 2 x 2 matrix".into()));
    }
    let streams = SeedStreams::new(seed);
    let mut rng = streams.stream(StreamKey::new(Purpose::Model));
    let model = build_pivot_tree(&random_pivot_tree(layout, (0, 0), &c.family, &mut rng)?)?;
    let oracle = OracleLines::new(&model)?;
    let den = oracle.denoisers();
    let schedule = cfg.schedule.build()?;
    let comp = &cfg.composition;
    let sample = |conds: &ConditionSet, s: u64| -> Result<LatentMatrix> {
        Ok(sample_matrix(layout, &den, &schedule, comp, conds, s, SamplerOptions::default())?.0)
    };
    let edge = first_row_and_column(layout);

    // conditioned runs: exact preservation and coupling
    let root = streams.child(0);
    let n_runs = c.n_runs.max(c.n_coupling_runs);
    let runs: Vec<(ConditionSet, LatentMatrix)> = (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let s = root.child(k as u64);
            let draw = model.joint().sample(&mut s.stream(StreamKey::new(Purpose::Model)));
            let conds = conditions_from(layout, &draw, &edge);
            let x = sample(&conds, s.seed())?;
            Ok((conds, x))
        })
        .collect::<Result<_>>()?;
    let mismatched = runs.iter().filter(|(cs, x)| !preserved(x, cs)).count();
    report.info("conditioned_runs", n_runs as f64)?;
    report.push("conditioned_runs_not_preserved", mismatched as f64, Check::Le(0.0))?;

    let pivot_vals: Vec<f64> = runs.iter().map(|(cs, _)| cs.get((0, 0)).expect("pivot conditioned")[0]).collect();
    let interior_vals: Vec<f64> = runs.iter().map(|(_, x)| x.entry((1, 1))[0]).collect();
    let corr = correlation(&pivot_vals, &interior_vals)?;
    report.push("pivot_to_interior_correlation", corr, Check::Gt(0.0))?;
    let cov = model.joint().covariance();
    let (p, q) = (layout.flat((0, 0), 0), layout.flat((1, 1), 0));
    report.info(
        "pivot_to_interior_correlation_model",
        cov[(p, q)] / (cov[(p, p)] * cov[(q, q)]).sqrt(),
    )?;

    // fully conditioned
    let full_draw = model.joint().sample(&mut streams.stream(StreamKey::new(Purpose::Model).step(1, 0)));
    let all: Vec<Entry> = layout.entries().collect();
    let full = conditions_from(layout, &full_draw, &all);
    let out = sample(&full, streams.child(1).seed())?;
    report.flag("fully_conditioned_returns_conditions", out.as_slice() == full_draw.as_slice())?;

    // no conditions versus a reference unconditional batch on other seeds
    let batch = |tag: u64| -> Result<Vec<Vec<f64>>> {
        let r = streams.child(tag);
        (0..c.n_samples)
            .into_par_iter()
            .map(|k| Ok(sample(&ConditionSet::new(), r.child(k as u64).seed())?.into_vec()))
            .collect()
    };
    let empty = batch(2)?;
    let reference = batch(3)?;
    let mut trng = streams.stream(StreamKey::new(Purpose::Statistic));
    let test = energy_permutation_test(&empty, &reference, c.n_permutations, &mut trng)?;
    report.info("empty_vs_reference_energy", test.statistic)?;
    report.push("empty_vs_reference_p_value", test.p_value, Check::Gt(c.alpha))?;

    let (_, run) = sample_matrix(layout, &den, &schedule, comp, &runs[0].0, root.child(0).seed(), SamplerOptions::default())?;
    report.steps = run.steps;
    report.details = json!({
        "layout": layout,
        "conditioned_entries": edge,
        "model_covariance": crate::models::serde_mat::to_nested(model.joint().covariance()),
    });
    Ok(report)
}
