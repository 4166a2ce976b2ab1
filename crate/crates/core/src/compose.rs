//! Score composition over the latent matrix.
//!
//! Rows (one view, all frames) are scored by a video-style estimator and
//! columns (one frame, all views) by a multi-view-style estimator. The two
//! are fused per entry either exactly (`row + col - entry`, valid when rows
//! and columns are conditionally independent given the shared entry) or by
//! a convex combination.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{direction_from, Denoiser};
use crate::error::{check_dim, Error, Result};
use crate::models::{Entry, MatrixLayout};
use crate::rng::{Purpose, SeedStreams, StreamKey};
use crate::schedule::perturb;

/// Row-major view × frame grid of `entry_dim`-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    layout: MatrixLayout,
    data: Vec<f64>,
}

impl LatentMatrix {
    pub fn zeros(layout: MatrixLayout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.dim()],
        }
    }

    pub fn from_vec(layout: MatrixLayout, data: Vec<f64>) -> Result<Self> {
        check_dim(layout.dim(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent matrix entries must be finite"));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> MatrixLayout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn entry(&self, e: Entry) -> &[f64] {
        &self.data[self.layout.coords(e)]
    }

    pub fn entry_mut(&mut self, e: Entry) -> &mut [f64] {
        let r = self.layout.coords(e);
        &mut self.data[r]
    }

    /// View `i` across all frames, `frames * entry_dim` values.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let n = self.layout.frames * self.layout.entry_dim;
        self.data[i * n..(i + 1) * n].to_vec()
    }

    /// Frame `j` across all views, `views * entry_dim` values.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.layout.views)
            .flat_map(|i| self.entry((i, j)).iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self + h * other`, elementwise.
    pub fn add_scaled(&self, h: f64, other: &LatentMatrix) -> LatentMatrix {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + h * b)
            .collect();
        LatentMatrix {
            layout: self.layout,
            data,
        }
    }
}

/// Which side of the convex combination carries `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Row (frame-sequence) term weighted `1 - s`, column (multi-view) term `s`.
    #[default]
    Algorithm,
    /// Row term weighted `s`, column term `1 - s`.
    Equation,
}

impl Orientation {
    /// `(row_weight, col_weight)` for scale `s`.
    pub fn weights(self, s: f64) -> (f64, f64) {
        match self {
            Orientation::Algorithm => (1.0 - s, s),
            Orientation::Equation => (s, 1.0 - s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionMode {
    #[default]
    Convex,
    /// `row + col - entry`; needs a per-entry estimator.
    Exact,
}

/// Scale `s` as a function of the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScaleSchedule {
    Constant { value: f64 },
    /// `start + (end - start) * min(step, steps) / steps`.
    Linear { start: f64, end: f64, steps: usize },
    /// Per-step values; the last one repeats past the end.
    Table { values: Vec<f64> },
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule::Constant { value: 0.5 }
    }
}

impl ScaleSchedule {
    pub fn value(&self, step: usize) -> f64 {
        match self {
            ScaleSchedule::Constant { value } => *value,
            ScaleSchedule::Linear { start, end, steps } => {
                if *steps == 0 {
                    return *end;
                }
                let t = step.min(*steps) as f64 / *steps as f64;
                start + (end - start) * t
            }
            ScaleSchedule::Table { values } => values[step.min(values.len() - 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match self {
            ScaleSchedule::Constant { value } => in_unit(*value),
            ScaleSchedule::Linear { start, end, .. } => in_unit(*start) && in_unit(*end),
            ScaleSchedule::Table { values } => !values.is_empty() && values.iter().all(|v| in_unit(*v)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("scale schedule values must lie in [0, 1]"))
        }
    }
}

/// The default scale: 0.5 at every step.
pub fn scale_schedule_default(_step: usize) -> f64 {
    0.5
}

/// How rollback re-noising scales its noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenoiseMode {
    /// `(sigma_hi - sigma_lo) * eps`.
    #[default]
    AsWritten,
    /// `sqrt(sigma_hi^2 - sigma_lo^2) * eps`.
    VarianceMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositionConfig {
    pub mode: CompositionMode,
    pub scale: ScaleSchedule,
    pub orientation: Orientation,
    /// Number of leading steps that are repeated (N_r).
    pub n_rollback: usize,
    /// Passes per rolled-back step (R).
    pub rollback_repeats: usize,
    pub renoise: RenoiseMode,
    /// Re-entry level as a fraction of the way from `sigma_{i+1}` back up to
    /// `sigma_i`; 1 re-enters at `sigma_i`.
    pub rollback_level: f64,
    /// Evaluate row and column lines on the rayon pool.
    pub parallel_lines: bool,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            mode: CompositionMode::Convex,
            scale: ScaleSchedule::default(),
            orientation: Orientation::Algorithm,
            n_rollback: 5,
            rollback_repeats: 2,
            renoise: RenoiseMode::AsWritten,
            rollback_level: 1.0,
            parallel_lines: false,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self, n_steps: usize) -> Result<()> {
        self.scale.validate()?;
        if self.n_rollback > n_steps {
            return Err(Error::invalid(format!(
                "n_rollback ({}) exceeds the number of steps ({n_steps})",
                self.n_rollback
            )));
        }
        if self.rollback_repeats == 0 {
            return Err(Error::invalid("rollback_repeats must be at least 1"));
        }
        if !(self.rollback_level > 0.0 && self.rollback_level <= 1.0) {
            return Err(Error::invalid("rollback_level must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Passes made at step `i`.
    pub fn repeats_at(&self, step: usize) -> usize {
        if step < self.n_rollback {
            self.rollback_repeats
        } else {
            1
        }
    }
}

/// Known clean entries of the augmented matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    entries: BTreeMap<Entry, Vec<f64>>,
}

impl ConditionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, e: Entry, value: Vec<f64>) {
        self.entries.insert(e, value);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, e: Entry) -> Option<&[f64]> {
        self.entries.get(&e).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Entry, &[f64])> {
        self.entries.iter().map(|(&e, v)| (e, v.as_slice()))
    }

    pub fn validate(&self, layout: MatrixLayout) -> Result<()> {
        for (e, v) in self.iter() {
            layout.check_entry(e)?;
            check_dim(layout.entry_dim, v.len())?;
        }
        Ok(())
    }
}

impl FromIterator<(Entry, Vec<f64>)> for ConditionSet {
    fn from_iter<T: IntoIterator<Item = (Entry, Vec<f64>)>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Overwrites each conditioned entry with its clean value perturbed to
/// `sigma`, drawing noise from the stream of `(step, repeat, entry)`.
pub fn apply_conditions(
    state: &mut LatentMatrix,
    conditions: &ConditionSet,
    sigma: f64,
    streams: &SeedStreams,
    step: usize,
    repeat: usize,
) -> Result<()> {
    conditions.validate(state.layout())?;
    for (e, clean) in conditions.iter() {
        if sigma == 0.0 {
            state.entry_mut(e).copy_from_slice(clean);
        } else {
            let mut rng = streams.stream(StreamKey::new(Purpose::Condition).step(step, repeat).entry(e.0, e.1));
            let noisy = perturb(clean, sigma, 1.0, &mut rng)?;
            state.entry_mut(e).copy_from_slice(&noisy);
        }
    }
    Ok(())
}

/// Row-wise, column-wise, or entry-wise estimators: either one shared
/// denoiser or one per line.
pub enum LineDenoisers<'a> {
    Shared(&'a dyn Denoiser),
    PerLine(Vec<&'a dyn Denoiser>),
}

impl<'a> LineDenoisers<'a> {
    pub fn get(&self, line: usize) -> &'a dyn Denoiser {
        match self {
            LineDenoisers::Shared(d) => *d,
            LineDenoisers::PerLine(ds) => ds[line],
        }
    }

    fn check(&self, lines: usize, dim: usize) -> Result<()> {
        match self {
            LineDenoisers::Shared(d) => check_dim(dim, d.dim()),
            LineDenoisers::PerLine(ds) => {
                check_dim(lines, ds.len())?;
                ds.iter().try_for_each(|d| check_dim(dim, d.dim()))
            }
        }
    }
}

/// `row_score + col_score - pivot_score`.
pub fn compose_scores_exact(row_score: &[f64], col_score: &[f64], pivot_score: &[f64]) -> Result<Vec<f64>> {
    check_dim(row_score.len(), col_score.len())?;
    check_dim(row_score.len(), pivot_score.len())?;
    Ok(row_score
        .iter()
        .zip(col_score)
        .zip(pivot_score)
        .map(|((r, c), p)| r + c - p)
        .collect())
}

/// `s * row_score + (1 - s) * col_score`.
pub fn compose_scores_convex(row_score: &[f64], col_score: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dim(row_score.len(), col_score.len())?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("scale must lie in [0, 1], got {s}")));
    }
    Ok(row_score
        .iter()
        .zip(col_score)
        .map(|(r, c)| s * r + (1.0 - s) * c)
        .collect())
}

/// Direction field plus the per-line denoiser outputs it was built from.
#[derive(Debug, Clone)]
pub struct DirectionField {
    pub direction: LatentMatrix,
    /// Row-estimator prediction of the clean matrix.
    pub row_prediction: LatentMatrix,
    /// Column-estimator prediction of the clean matrix.
    pub col_prediction: LatentMatrix,
    pub denoiser_calls: usize,
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    Row,
    Col,
}

fn line_input(state: &LatentMatrix, axis: Axis, k: usize) -> Vec<f64> {
    match axis {
        Axis::Row => state.row(k),
        Axis::Col => state.column(k),
    }
}

fn scatter(target: &mut LatentMatrix, axis: Axis, k: usize, values: &[f64]) {
    let l = target.layout();
    let d = l.entry_dim;
    let entries = match axis {
        Axis::Row => l.row_entries(k),
        Axis::Col => l.col_entries(k),
    };
    for (n, e) in entries.into_iter().enumerate() {
        target.entry_mut(e).copy_from_slice(&values[n * d..(n + 1) * d]);
    }
}

fn evaluate_lines(
    state: &LatentMatrix,
    denoisers: &LineDenoisers,
    axis: Axis,
    order: &[usize],
    sigma: f64,
    parallel: bool,
) -> Result<LatentMatrix> {
    let mut pred = LatentMatrix::zeros(state.layout());
    let outputs: Vec<(usize, Vec<f64>)> = match denoisers {
        LineDenoisers::Shared(d) => {
            let inputs: Vec<Vec<f64>> = order.iter().map(|&k| line_input(state, axis, k)).collect();
            order.iter().copied().zip(d.evaluate_batch(&inputs, sigma)?).collect()
        }
        LineDenoisers::PerLine(_) => {
            let eval = |&k: &usize| -> Result<(usize, Vec<f64>)> {
                Ok((k, denoisers.get(k).evaluate(&line_input(state, axis, k), sigma)?))
            };
            if parallel {
                order.par_iter().map(eval).collect::<Result<_>>()?
            } else {
                order.iter().map(eval).collect::<Result<_>>()?
            }
        }
    };
    for (k, out) in outputs {
        scatter(&mut pred, axis, k, &out);
    }
    Ok(pred)
}

fn check_lines(state: &LatentMatrix, rows: &LineDenoisers, cols: &LineDenoisers) -> Result<()> {
    let l = state.layout();
    rows.check(l.views, l.frames * l.entry_dim)?;
    cols.check(l.frames, l.views * l.entry_dim)
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &k in order {
        if k >= n || std::mem::replace(&mut seen[k], true) {
            return Err(Error::invalid("evaluation order must be a permutation"));
        }
    }
    if order.len() != n {
        return Err(Error::invalid("evaluation order must be a permutation"));
    }
    Ok(())
}

/// Convex direction field with an explicit evaluation order for rows and
/// columns. The result does not depend on the order.
pub fn matrix_direction_ordered(
    state: &LatentMatrix,
    rows: &LineDenoisers,
    cols: &LineDenoisers,
    sigma: f64,
    s: f64,
    orientation: Orientation,
    row_order: &[usize],
    col_order: &[usize],
    parallel: bool,
) -> Result<DirectionField> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("noise level must be positive, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("scale must lie in [0, 1], got {s}")));
    }
    check_lines(state, rows, cols)?;
    let l = state.layout();
    check_order(row_order, l.views)?;
    check_order(col_order, l.frames)?;

    let row_prediction = evaluate_lines(state, rows, Axis::Row, row_order, sigma, parallel)?;
    let col_prediction = evaluate_lines(state, cols, Axis::Col, col_order, sigma, parallel)?;
    let (wr, wc) = orientation.weights(s);
    let dr = direction_from(state.as_slice(), row_prediction.as_slice(), sigma);
    let dc = direction_from(state.as_slice(), col_prediction.as_slice(), sigma);
    let data = dr.iter().zip(&dc).map(|(a, b)| wr * a + wc * b).collect();
    Ok(DirectionField {
        direction: LatentMatrix { layout: l, data },
        row_prediction,
        col_prediction,
        denoiser_calls: l.views + l.frames,
    })
}

/// Convex direction field: `w_row * d_row + w_col * d_col` per entry, with
/// one evaluation per row and one per column.
pub fn matrix_direction_detailed(
    state: &LatentMatrix,
    rows: &LineDenoisers,
    cols: &LineDenoisers,
    sigma: f64,
    s: f64,
    orientation: Orientation,
    parallel: bool,
) -> Result<DirectionField> {
    let l = state.layout();
    let ro: Vec<usize> = (0..l.views).collect();
    let co: Vec<usize> = (0..l.frames).collect();
    matrix_direction_ordered(state, rows, cols, sigma, s, orientation, &ro, &co, parallel)
}

pub fn matrix_direction(
    state: &LatentMatrix,
    rows: &LineDenoisers,
    cols: &LineDenoisers,
    sigma: f64,
    s: f64,
) -> Result<LatentMatrix> {
    Ok(matrix_direction_detailed(state, rows, cols, sigma, s, Orientation::Algorithm, false)?.direction)
}

/// Exact direction field `d_row + d_col - d_entry`, with the per-entry
/// estimators indexed by row-major entry index.
pub fn matrix_direction_exact(
    state: &LatentMatrix,
    rows: &LineDenoisers,
    cols: &LineDenoisers,
    entries: &LineDenoisers,
    sigma: f64,
    parallel: bool,
) -> Result<DirectionField> {
    let mut field = matrix_direction_detailed(state, rows, cols, sigma, 0.5, Orientation::Algorithm, parallel)?;
    let l = state.layout();
    entries.check(l.n_entries(), l.entry_dim)?;
    let dr = direction_from(state.as_slice(), field.row_prediction.as_slice(), sigma);
    let dc = direction_from(state.as_slice(), field.col_prediction.as_slice(), sigma);
    let mut data = Vec::with_capacity(l.dim());
    for e in l.entries() {
        let x = state.entry(e);
        let de = direction_from(x, &entries.get(l.entry_index(e)).evaluate(x, sigma)?, sigma);
        for (k, c) in l.coords(e).zip(de) {
            data.push(dr[k] + dc[k] - c);
        }
    }
    field.direction = LatentMatrix { layout: l, data };
    field.denoiser_calls += l.n_entries();
    Ok(field)
}
