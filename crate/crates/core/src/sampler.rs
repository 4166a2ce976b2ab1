//! Probability-flow ODE sampling, single-vector and over the latent matrix
//! with rollback ("variance-reducing") passes in the first steps.

use rand::Rng;
use serde::Serialize;

use crate::compose::{
    apply_conditions, matrix_direction_detailed, matrix_direction_exact, CompositionConfig, CompositionMode,
    ConditionSet, LatentMatrix, LineDenoisers, RenoiseMode,
};
use crate::denoise::{ode_direction, Denoiser};
use crate::error::{Error, Result};
use crate::models::MatrixLayout;
use crate::rng::{standard_normals, Purpose, SeedStreams, StreamKey};
use crate::schedule::SigmaSchedule;

/// Euler integration of `dx/dsigma = (x - D(x; sigma)) / sigma` from `x`
/// at `sigma_0` down to 0.
pub fn pf_ode_integrate(denoiser: &dyn Denoiser, schedule: &SigmaSchedule, mut x: Vec<f64>) -> Result<Vec<f64>> {
    let levels = schedule.levels();
    for w in levels.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let d = ode_direction(denoiser, &x, hi)?;
        for (xi, di) in x.iter_mut().zip(d) {
            *xi += (lo - hi) * di;
        }
    }
    Ok(x)
}

/// Draws `x = sigma_0 * eps` from `rng` and integrates it to `sigma = 0`.
pub fn pf_ode_sample<R: Rng + ?Sized>(denoiser: &dyn Denoiser, schedule: &SigmaSchedule, rng: &mut R) -> Result<Vec<f64>> {
    let s0 = schedule.sigma_max();
    let x = standard_normals(rng, denoiser.dim()).into_iter().map(|e| s0 * e).collect();
    pf_ode_integrate(denoiser, schedule, x)
}

/// Estimators used by [`sample_matrix`].
pub struct MatrixDenoisers<'a> {
    pub rows: LineDenoisers<'a>,
    pub cols: LineDenoisers<'a>,
    /// Per-entry estimators, required by [`CompositionMode::Exact`].
    pub entries: Option<LineDenoisers<'a>>,
}

impl<'a> MatrixDenoisers<'a> {
    pub fn convex(rows: LineDenoisers<'a>, cols: LineDenoisers<'a>) -> Self {
        Self {
            rows,
            cols,
            entries: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Record the state and both line predictions before every pass.
    pub snapshots: bool,
}

/// One composed step (one pass of one schedule step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub repeat: usize,
    pub sigma: f64,
    pub sigma_next: f64,
    pub scale: f64,
    pub denoiser_calls: usize,
}

/// State before conditioning injection at the start of a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub repeat: usize,
    pub sigma: f64,
    pub state: LatentMatrix,
    pub row_prediction: LatentMatrix,
    pub col_prediction: LatentMatrix,
}

#[derive(Debug, Clone)]
pub struct SamplerRun {
    pub schedule: SigmaSchedule,
    pub config: CompositionConfig,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl SamplerRun {
    pub fn composed_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn denoiser_calls(&self) -> usize {
        self.steps.iter().map(|s| s.denoiser_calls).sum()
    }
}

/// Re-noises `x_next` from `sigma_lo` back up to `sigma_hi` with fresh noise
/// per entry drawn from the stream of `(step, repeat, entry)`.
pub fn vrs_renoise(
    x_next: &LatentMatrix,
    sigma_hi: f64,
    sigma_lo: f64,
    mode: RenoiseMode,
    streams: &SeedStreams,
    step: usize,
    repeat: usize,
) -> Result<LatentMatrix> {
    if !(sigma_lo >= 0.0 && sigma_hi >= sigma_lo) {
        return Err(Error::invalid(format!(
            "re-noising needs sigma_hi >= sigma_lo >= 0, got {sigma_hi} and {sigma_lo}"
        )));
    }
    if sigma_hi == sigma_lo {
        return Ok(x_next.clone());
    }
    let scale = match mode {
        RenoiseMode::AsWritten => sigma_hi - sigma_lo,
        RenoiseMode::VarianceMatched => (sigma_hi * sigma_hi - sigma_lo * sigma_lo).sqrt(),
    };
    let layout = x_next.layout();
    let mut out = x_next.clone();
    for e in layout.entries() {
        let mut rng = streams.stream(StreamKey::new(Purpose::Rollback).step(step, repeat).entry(e.0, e.1));
        let eps = standard_normals(&mut rng, layout.entry_dim);
        for (v, n) in out.entry_mut(e).iter_mut().zip(eps) {
            *v += scale * n;
        }
    }
    Ok(out)
}

/// Initial noise `sigma_0 * eps`, one stream per entry.
pub fn initial_noise(layout: MatrixLayout, sigma_max: f64, streams: &SeedStreams) -> LatentMatrix {
    let mut x = LatentMatrix::zeros(layout);
    for e in layout.entries() {
        let mut rng = streams.stream(StreamKey::new(Purpose::InitialNoise).entry(e.0, e.1));
        let eps = standard_normals(&mut rng, layout.entry_dim);
        for (v, n) in x.entry_mut(e).iter_mut().zip(eps) {
            *v = sigma_max * n;
        }
    }
    x
}

/// Samples a latent matrix by composed Euler steps.
///
/// Step `i` makes `R` passes when `i < N_r` and one pass otherwise. Each
/// pass injects the noised conditions, evaluates the composed direction at
/// the current level, and takes an Euler step to `sigma_{i+1}`. Every pass
/// but the last re-noises the result back up and starts over from there.
pub fn sample_matrix(
    layout: MatrixLayout,
    denoisers: &MatrixDenoisers,
    schedule: &SigmaSchedule,
    config: &CompositionConfig,
    conditions: &ConditionSet,
    seed: u64,
    options: SamplerOptions,
) -> Result<(LatentMatrix, SamplerRun)> {
    let n = schedule.n_steps();
    config.validate(n)?;
    conditions.validate(layout)?;
    if config.mode == CompositionMode::Exact && denoisers.entries.is_none() {
        return Err(Error::invalid("exact composition needs per-entry denoisers"));
    }

    let streams = SeedStreams::new(seed);
    let mut x = initial_noise(layout, schedule.sigma_max(), &streams);
    let mut steps = Vec::with_capacity(n + config.n_rollback * config.rollback_repeats);
    let mut snapshots = Vec::new();

    for i in 0..n {
        let s_hi = schedule.sigma(i);
        let s_lo = schedule.sigma(i + 1);
        let s = config.scale.value(i);
        let repeats = config.repeats_at(i);
        let mut sigma = s_hi;
        for rep in 0..repeats {
            let raw = options.snapshots.then(|| x.clone());
            apply_conditions(&mut x, conditions, sigma, &streams, i, rep)?;
            let field = match config.mode {
                CompositionMode::Convex => matrix_direction_detailed(
                    &x,
                    &denoisers.rows,
                    &denoisers.cols,
                    sigma,
                    s,
                    config.orientation,
                    config.parallel_lines,
                )?,
                CompositionMode::Exact => matrix_direction_exact(
                    &x,
                    &denoisers.rows,
                    &denoisers.cols,
                    denoisers.entries.as_ref().expect("checked above"),
                    sigma,
                    config.parallel_lines,
                )?,
            };
            if let Some(state) = raw {
                snapshots.push(Snapshot {
                    step: i,
                    repeat: rep,
                    sigma,
                    state,
                    row_prediction: field.row_prediction.clone(),
                    col_prediction: field.col_prediction.clone(),
                });
            }
            steps.push(StepRecord {
                step: i,
                repeat: rep,
                sigma,
                sigma_next: s_lo,
                scale: s,
                denoiser_calls: field.denoiser_calls,
            });
            let next = x.add_scaled(s_lo - sigma, &field.direction);
            if rep + 1 < repeats {
                let reentry = s_lo + config.rollback_level * (s_hi - s_lo);
                x = vrs_renoise(&next, reentry, s_lo, config.renoise, &streams, i, rep)?;
                sigma = reentry;
            } else {
                x = next;
            }
        }
    }
    apply_conditions(&mut x, conditions, 0.0, &streams, n, 0)?;
    if !x.is_finite() {
        return Err(Error::invalid("sampler diverged to non-finite values"));
    }
    let run = SamplerRun {
        schedule: schedule.clone(),
        config: config.clone(),
        seed,
        steps,
        snapshots,
    };
    Ok((x, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{denoiser_from_gaussian, CountingDenoiser, GaussianDenoiser, IdentityDenoiser};
    use crate::models::{GaussianModel, MatrixGaussianModel};
    use crate::schedule::karras_sigmas;
    use nalgebra::DMatrix;

    fn independent(layout: MatrixLayout) -> MatrixGaussianModel {
        let n = layout.dim();
        let d = layout.entry_dim;
        let cov = DMatrix::from_fn(n, n, |r, c| {
            if r / d != c / d {
                0.0
            } else if r == c {
                0.5 + 0.1 * (r / d) as f64
            } else {
                0.1
            }
        });
        let mean = (0..n).map(|k| k as f64 * 0.25 - 1.0).collect();
        MatrixGaussianModel::new(layout, GaussianModel::from_parts(mean, cov).unwrap()).unwrap()
    }

    fn lines(m: &MatrixGaussianModel) -> (Vec<GaussianDenoiser>, Vec<GaussianDenoiser>) {
        let l = m.layout();
        (
            (0..l.views).map(|i| denoiser_from_gaussian(m.row_marginal(i).unwrap())).collect(),
            (0..l.frames).map(|j| denoiser_from_gaussian(m.col_marginal(j).unwrap())).collect(),
        )
    }

    fn dyn_lines(ds: &[GaussianDenoiser]) -> LineDenoisers<'_> {
        LineDenoisers::PerLine(ds.iter().map(|d| d as &dyn Denoiser).collect())
    }

    #[test]
    fn identity_denoiser_returns_initial_noise() {
        let sched = karras_sigmas(10, 0.01, 5.0, 7.0).unwrap();
        let d = IdentityDenoiser { dim: 3 };
        let streams = SeedStreams::new(3);
        let key = StreamKey::new(Purpose::InitialNoise);
        let out = pf_ode_sample(&d, &sched, &mut streams.stream(key)).unwrap();
        let eps = standard_normals(&mut streams.stream(key), 3);
        assert_eq!(out, eps.iter().map(|e| 5.0 * e).collect::<Vec<_>>());
    }

    #[test]
    fn euler_contraction_on_standard_normal() {
        // N(0, 1) target, 100 Karras steps from sigma_max 80; value from an independent float64 recurrence
        let sched = karras_sigmas(100, 0.002, 80.0, 7.0).unwrap();
        let d = denoiser_from_gaussian(GaussianModel::from_parts(vec![0.0], DMatrix::identity(1, 1)).unwrap());
        let out = pf_ode_integrate(&d, &sched, vec![80.0]).unwrap();
        assert!((out[0] - 0.9742590501377806).abs() < 1e-12, "{}", out[0]);
    }

    #[test]
    fn no_rollback_is_plain_loop() {
        let layout = MatrixLayout::new(2, 3, 1).unwrap();
        let m = independent(layout);
        let (rows, cols) = lines(&m);
        let dens = MatrixDenoisers::convex(dyn_lines(&rows), dyn_lines(&cols));
        let sched = karras_sigmas(12, 0.002, 80.0, 7.0).unwrap();
        let cfg = CompositionConfig {
            n_rollback: 0,
            ..CompositionConfig::default()
        };
        let (out, run) = sample_matrix(layout, &dens, &sched, &cfg, &ConditionSet::new(), 9, SamplerOptions::default()).unwrap();
        assert_eq!(run.composed_steps(), 12);

        // hand-written Euler loop with the same streams
        let streams = SeedStreams::new(9);
        let mut x = initial_noise(layout, 80.0, &streams);
        for w in sched.levels().windows(2) {
            let f = matrix_direction_detailed(&x, &dens.rows, &dens.cols, w[0], 0.5, cfg.orientation, false).unwrap();
            x = x.add_scaled(w[1] - w[0], &f.direction);
        }
        assert_eq!(out, x);
    }

    #[test]
    fn independent_model_reduces_to_entrywise_pf_ode() {
        let layout = MatrixLayout::new(3, 2, 2).unwrap();
        let m = independent(layout);
        let (rows, cols) = lines(&m);
        let dens = MatrixDenoisers::convex(dyn_lines(&rows), dyn_lines(&cols));
        let sched = karras_sigmas(30, 0.002, 80.0, 7.0).unwrap();
        let cfg = CompositionConfig {
            n_rollback: 0,
            ..CompositionConfig::default()
        };
        let seed = 17;
        let (out, _) = sample_matrix(layout, &dens, &sched, &cfg, &ConditionSet::new(), seed, SamplerOptions::default()).unwrap();
        let streams = SeedStreams::new(seed);
        for e in layout.entries() {
            let single = denoiser_from_gaussian(m.entry_marginal(e).unwrap());
            let mut rng = streams.stream(StreamKey::new(Purpose::InitialNoise).entry(e.0, e.1));
            let x = pf_ode_sample(&single, &sched, &mut rng).unwrap();
            assert_eq!(out.entry(e), x.as_slice(), "entry {e:?}");
        }
    }

    #[test]
    fn rollback_accounting() {
        let layout = MatrixLayout::new(3, 4, 1).unwrap();
        let m = independent(layout);
        let (rows, cols) = lines(&m);
        let counted_rows: Vec<_> = rows.into_iter().map(CountingDenoiser::new).collect();
        let counted_cols: Vec<_> = cols.into_iter().map(CountingDenoiser::new).collect();
        let dens = MatrixDenoisers::convex(
            LineDenoisers::PerLine(counted_rows.iter().map(|d| d as &dyn Denoiser).collect()),
            LineDenoisers::PerLine(counted_cols.iter().map(|d| d as &dyn Denoiser).collect()),
        );
        let sched = karras_sigmas(50, 0.002, 80.0, 7.0).unwrap();
        let cfg = CompositionConfig::default();
        let (_, run) = sample_matrix(layout, &dens, &sched, &cfg, &ConditionSet::new(), 1, SamplerOptions::default()).unwrap();
        assert_eq!(run.composed_steps(), 55);
        assert!(run.steps.iter().all(|s| s.denoiser_calls == 7));
        let actual: usize = counted_rows.iter().map(|c| c.calls()).sum::<usize>()
            + counted_cols.iter().map(|c| c.calls()).sum::<usize>();
        assert_eq!(actual, 55 * 7);
        assert_eq!(run.denoiser_calls(), actual);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let layout = MatrixLayout::new(2, 2, 2).unwrap();
        let m = independent(layout);
        let (rows, cols) = lines(&m);
        let dens = MatrixDenoisers::convex(dyn_lines(&rows), dyn_lines(&cols));
        let sched = karras_sigmas(20, 0.002, 80.0, 7.0).unwrap();
        let cfg = CompositionConfig::default();
        let run = |seed| sample_matrix(layout, &dens, &sched, &cfg, &ConditionSet::new(), seed, SamplerOptions::default()).unwrap().0;
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        let par = CompositionConfig {
            parallel_lines: true,
            ..cfg.clone()
        };
        let (p, _) = sample_matrix(layout, &dens, &sched, &par, &ConditionSet::new(), 5, SamplerOptions::default()).unwrap();
        assert_eq!(p, run(5));
    }

    #[test]
    fn conditions_survive_to_output() {
        let layout = MatrixLayout::new(3, 3, 1).unwrap();
        let m = independent(layout);
        let (rows, cols) = lines(&m);
        let dens = MatrixDenoisers::convex(dyn_lines(&rows), dyn_lines(&cols));
        let sched = karras_sigmas(15, 0.002, 80.0, 7.0).unwrap();
        let conds: ConditionSet = [((0, 0), vec![0.123456789]), ((0, 2), vec![-7.5]), ((2, 0), vec![1e-17])]
            .into_iter()
            .collect();
        let (out, run) = sample_matrix(layout, &dens, &sched, &CompositionConfig::default(), &conds, 3, SamplerOptions { snapshots: true }).unwrap();
        for (e, v) in conds.iter() {
            assert_eq!(out.entry(e), v);
        }
        assert_eq!(run.snapshots.len(), run.composed_steps());
    }

    #[test]
    fn renoise_statistics() {
        let layout = MatrixLayout::new(1000, 100, 1).unwrap();
        let zero = LatentMatrix::zeros(layout);
        let streams = SeedStreams::new(8);
        let same = vrs_renoise(&zero, 1.0, 1.0, RenoiseMode::AsWritten, &streams, 0, 0).unwrap();
        assert_eq!(same, zero);
        let std = |m: &LatentMatrix| {
            let v = m.as_slice();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        let a = vrs_renoise(&zero, 2.0, 1.0, RenoiseMode::AsWritten, &streams, 0, 0).unwrap();
        assert!((std(&a) - 1.0).abs() < 0.02, "{}", std(&a));
        let b = vrs_renoise(&zero, 2.0, 1.0, RenoiseMode::VarianceMatched, &streams, 0, 0).unwrap();
        assert!((std(&b) - 3f64.sqrt()).abs() < 0.03, "{}", std(&b));
        assert!(vrs_renoise(&zero, 1.0, 2.0, RenoiseMode::AsWritten, &streams, 0, 0).is_err());
    }

    #[test]
    fn rejects_invalid_configs() {
        let layout = MatrixLayout::new(2, 2, 1).unwrap();
        let d = IdentityDenoiser { dim: 2 };
        let dens = MatrixDenoisers::convex(LineDenoisers::Shared(&d), LineDenoisers::Shared(&d));
        let sched = karras_sigmas(4, 0.01, 1.0, 7.0).unwrap();
        let cfg = CompositionConfig::default(); // n_rollback 5 > 4 steps
        assert!(sample_matrix(layout, &dens, &sched, &cfg, &ConditionSet::new(), 0, SamplerOptions::default()).is_err());
        let exact = CompositionConfig {
            mode: CompositionMode::Exact,
            n_rollback: 0,
            ..CompositionConfig::default()
        };
        assert!(sample_matrix(layout, &dens, &sched, &exact, &ConditionSet::new(), 0, SamplerOptions::default()).is_err());
        let wrong = IdentityDenoiser { dim: 3 };
        let bad = MatrixDenoisers::convex(LineDenoisers::Shared(&wrong), LineDenoisers::Shared(&d));
        let ok_cfg = CompositionConfig {
            n_rollback: 0,
            ..CompositionConfig::default()
        };
        assert!(sample_matrix(layout, &bad, &sched, &ok_cfg, &ConditionSet::new(), 0, SamplerOptions::default()).is_err());
    }
}
