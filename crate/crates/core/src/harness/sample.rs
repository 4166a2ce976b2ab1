//! Plain composed sampling from a random pivot-tree model with exact line
//! denoisers, with step accounting.

use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::ExperimentConfig;
use super::report::{Provenance, RunReport, SnapshotSet};
use crate::compose::{ConditionSet, LineDenoisers};
use crate::denoise::{denoiser_from_gaussian, CountingDenoiser, Denoiser, GaussianDenoiser};
use crate::error::Result;
use crate::models::{build_pivot_tree, random_pivot_tree, MatrixLayout};
use crate::rng::{Purpose, SeedStreams, StreamKey};
use crate::sampler::{sample_matrix, MatrixDenoisers, SamplerOptions};

pub fn run_sample(cfg: &ExperimentConfig, seed: u64, provenance: Provenance, snapshots: bool) -> Result<RunReport> {
    let p = &cfg.sample;
    let mut report = RunReport::new("sample", provenance);
    let layout = MatrixLayout::new(p.views, p.frames, p.entry_dim)?;
    let streams = SeedStreams::new(seed);
    let mut rng = streams.stream(StreamKey::new(Purpose::Model));
    let pivot = (rng.random_range(0..p.views), rng.random_range(0..p.frames));
    let model = build_pivot_tree(&random_pivot_tree(layout, pivot, &p.family, &mut rng)?)?;
    let rows: Vec<CountingDenoiser<GaussianDenoiser>> = (0..p.views)
        .map(|i| Ok(CountingDenoiser::new(denoiser_from_gaussian(model.row_marginal(i)?))))
        .collect::<Result<_>>()?;
    let cols: Vec<CountingDenoiser<GaussianDenoiser>> = (0..p.frames)
        .map(|j| Ok(CountingDenoiser::new(denoiser_from_gaussian(model.col_marginal(j)?))))
        .collect::<Result<_>>()?;
    let den = MatrixDenoisers::convex(
        LineDenoisers::PerLine(rows.iter().map(|d| d as &dyn Denoiser).collect()),
        LineDenoisers::PerLine(cols.iter().map(|d| d as &dyn Denoiser).collect()),
    );
    let schedule = cfg.schedule.build()?;
    let comp = &cfg.composition;

    let runs = (0..p.n_samples)
        .into_par_iter()
        .map(|k| {
            let options = SamplerOptions {
                snapshots: snapshots && k == 0,
            };
            sample_matrix(layout, &den, &schedule, comp, &ConditionSet::new(), streams.child(k as u64).seed(), options)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = schedule.n_steps();
    let expected_steps = n + comp.n_rollback * (comp.rollback_repeats - 1);
    let first = &runs[0].1;
    report.info("composed_steps", first.composed_steps() as f64)?;
    report.info("composed_steps_expected", expected_steps as f64)?;
    report.flag("composed_steps_exact", runs.iter().all(|(_, r)| r.composed_steps() == expected_steps))?;
    let per_step = p.views + p.frames;
    report.flag(
        "calls_per_composed_step_equal_views_plus_frames",
        runs.iter().all(|(_, r)| r.steps.iter().all(|s| s.denoiser_calls == per_step)),
    )?;
    let counted: usize = rows.iter().chain(&cols).map(|d| d.calls()).sum();
    report.flag(
        "counted_denoiser_calls_match",
        counted == p.n_samples * expected_steps * per_step,
    )?;
    report.info("extra_step_fraction", (expected_steps - n) as f64 / n as f64)?;

    let dim = layout.dim();
    let m = runs.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in &runs {
        for (a, v) in mean.iter_mut().zip(x.as_slice()) {
            *a += v / m;
        }
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for (x, _) in &runs {
        let r = nalgebra::DVector::from_iterator(dim, x.as_slice().iter().zip(&mean).map(|(v, mu)| v - mu));
        cov += &r * r.transpose() / (m - 1.0);
    }
    let truth = model.joint();
    let mean_err = mean.iter().zip(truth.mean().iter()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    report.info("sample_mean_max_abs_error", mean_err)?;
    report.info(
        "sample_covariance_relative_frobenius_error",
        (&cov - truth.covariance()).norm() / truth.covariance().norm(),
    )?;
    report.flag("all_samples_finite", runs.iter().all(|(x, _)| x.is_finite()))?;

    report.steps = first.steps.clone();
    if snapshots {
        report.snapshots.push(SnapshotSet {
            name: "sample_seed0".to_string(),
            snapshots: first.snapshots.clone(),
        });
    }
    report.details = json!({
        "layout": layout,
        "pivot": pivot,
        "sample_mean": mean,
        "model_mean": truth.mean().as_slice(),
    });
    Ok(report)
}
