//! Convex-combination error against exact composition over a grid of scales.

use rand::Rng;
use serde_json::json;

use super::config::ExperimentConfig;
use super::report::{Check, Provenance, RunReport};
use super::theorem::marginal_score;
use crate::compose::{compose_scores_convex, compose_scores_exact};
use crate::error::Result;
use crate::models::{build_pivot_tree, random_pivot_tree, Entry, MatrixGaussianModel, MatrixLayout};
use crate::rng::{Purpose, SeedStreams, StreamKey};

/// Row, column, and entry scores of the noised model at `e`, restricted to `e`.
fn entry_scores(m: &MatrixGaussianModel, x: &[f64], e: Entry, sigma: f64) -> Result<[Vec<f64>; 3]> {
    let l = m.layout();
    let d = l.entry_dim;
    let pick = |entries: &[Entry]| -> Vec<f64> { l.coords_of(entries).iter().map(|&c| x[c]).collect() };
    let row = marginal_score(m.row_marginal(e.0)?, &pick(&l.row_entries(e.0)), sigma)?;
    let col = marginal_score(m.col_marginal(e.1)?, &pick(&l.col_entries(e.1)), sigma)?;
    let ent = marginal_score(m.entry_marginal(e)?, &pick(&[e]), sigma)?;
    Ok([row[e.1 * d..(e.1 + 1) * d].to_vec(), col[e.0 * d..(e.0 + 1) * d].to_vec(), ent])
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    err / (1.0 + scale)
}

struct Grid {
    /// `[level][s]` maximum normalized error against exact composition.
    errors: Vec<Vec<f64>>,
    /// Largest gap between a scale and its orientation-swapped counterpart.
    swap_gap: f64,
}

fn sweep_model(
    cfg: &ExperimentConfig,
    m: &MatrixGaussianModel,
    entries: &[Entry],
    streams: &SeedStreams,
    index: usize,
) -> Result<Grid> {
    let sw = &cfg.sweep;
    let mut errors = vec![vec![0.0f64; sw.s_grid.len()]; sw.levels.len()];
    let mut swap_gap = 0.0f64;
    for (li, &sigma) in sw.levels.iter().enumerate() {
        let noised = m.joint().noised(sigma)?;
        let mut rng = streams.stream(StreamKey::new(Purpose::Statistic).step(index, li));
        for _ in 0..sw.n_points {
            let x = noised.sample(&mut rng);
            for &e in entries {
                let [row, col, ent] = entry_scores(m, &x, e, sigma)?;
                let exact = compose_scores_exact(&row, &col, &ent)?;
                for (si, &s) in sw.s_grid.iter().enumerate() {
                    let convex = compose_scores_convex(&row, &col, s)?;
                    let swapped = compose_scores_convex(&col, &row, 1.0 - s)?;
                    let err = gap(&convex, &exact);
                    errors[li][si] = errors[li][si].max(err);
                    swap_gap = swap_gap.max((err - gap(&swapped, &exact)).abs());
                }
            }
        }
    }
    Ok(Grid { errors, swap_gap })
}

pub fn run_sweep_s(cfg: &ExperimentConfig, seed: u64, provenance: Provenance) -> Result<RunReport> {
    let sw = &cfg.sweep;
    let mut report = RunReport::new("sweep-s", provenance);
    let layout = MatrixLayout::new(sw.views, sw.frames, sw.entry_dim)?;
    let streams = SeedStreams::new(seed);

    let mut grids = Vec::new();
    let mut pivots = Vec::new();
    for k in 0..sw.n_models {
        let mut rng = streams.stream(StreamKey::new(Purpose::Model).step(k, 0));
        let pivot = (rng.random_range(0..sw.views), rng.random_range(0..sw.frames));
        let m = build_pivot_tree(&random_pivot_tree(layout, pivot, &sw.family, &mut rng)?)?;
        grids.push(sweep_model(cfg, &m, &[pivot], &streams, k)?);
        pivots.push(pivot);
    }

    let mut rng = streams.stream(StreamKey::new(Purpose::Model).step(sw.n_models, 0));
    let mut spec = random_pivot_tree(layout, (0, 0), &sw.family, &mut rng)?;
    for c in spec.row_coeffs.iter_mut().chain(&mut spec.col_coeffs).chain(&mut spec.rest_coeffs) {
        c.fill(0.0);
    }
    let independent = build_pivot_tree(&spec)?;
    let all: Vec<Entry> = layout.entries().collect();
    let ind = sweep_model(cfg, &independent, &all, &streams, sw.n_models)?;

    let ind_max = ind.errors.iter().flatten().copied().fold(0.0, f64::max);
    report.push("independent_max_error", ind_max, Check::Le(sw.tolerance))?;
    let swap = grids.iter().map(|g| g.swap_gap).fold(ind.swap_gap, f64::max);
    report.push("orientation_swap_gap", swap, Check::Le(sw.tolerance))?;

    let curve = |li: usize, si: usize| grids.iter().map(|g| g.errors[li][si]).fold(0.0, f64::max);
    if let Some(half) = sw.s_grid.iter().position(|&s| s == 0.5) {
        let weakest = (0..sw.levels.len()).map(|li| curve(li, half)).fold(f64::INFINITY, f64::min);
        report.push("correlated_error_s_0.5_min_over_levels", weakest, Check::Gt(sw.min_correlated_error))?;
    }
    for (li, sigma) in sw.levels.iter().enumerate() {
        for (si, s) in sw.s_grid.iter().enumerate() {
            report.info(&format!("correlated_error_sigma_{sigma}_s_{s}"), curve(li, si))?;
        }
    }
    report.details = json!({
        "s_grid": sw.s_grid,
        "levels": sw.levels,
        "pivots": pivots,
        "errors": grids.iter().map(|g| &g.errors).collect::<Vec<_>>(),
        "independent_errors": ind.errors,
    });
    Ok(report)
}
