//! Posterior-mean denoisers and the score / ODE-direction conversions.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::models::{GaussianModel, GmmModel};

/// A posterior-mean estimator `D(x; sigma) = E[x0 | x0 + sigma * eps = x]`.
///
/// Implementations must be deterministic and re-entrant.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// Evaluates several inputs at one noise level. Results must equal
    /// per-input [`Denoiser::evaluate`] calls bit for bit.
    fn evaluate_batch(&self, xs: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.evaluate(x, sigma)).collect()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).evaluate(x, sigma)
    }
    fn evaluate_batch(&self, xs: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        (**self).evaluate_batch(xs, sigma)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).evaluate(x, sigma)
    }
    fn evaluate_batch(&self, xs: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        (**self).evaluate_batch(xs, sigma)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise level must be finite and non-negative, got {sigma}")))
    }
}

/// Exact denoiser of a Gaussian prior:
/// `mu + Sigma (Sigma + sigma^2 I)^{-1} (x - mu)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    model: GaussianModel,
}

impl GaussianDenoiser {
    pub fn new(model: GaussianModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &GaussianModel {
        &self.model
    }
}

pub fn denoiser_from_gaussian(model: GaussianModel) -> GaussianDenoiser {
    GaussianDenoiser::new(model)
}

impl Denoiser for GaussianDenoiser {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.evaluate_batch(std::slice::from_ref(&x.to_vec()), sigma)?.remove(0))
    }

    fn evaluate_batch(&self, xs: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        check_sigma(sigma)?;
        for x in xs {
            check_dim(self.dim(), x.len())?;
        }
        let noised = self.model.noised(sigma)?;
        let mu = self.model.mean();
        let cov = self.model.covariance();
        xs.iter()
            .map(|x| {
                let r = DVector::from_column_slice(x) - mu;
                let w = noised.cholesky().solve(&r);
                Ok((mu + cov * w).iter().copied().collect())
            })
            .collect()
    }
}

/// Exact denoiser of a Gaussian-mixture prior: responsibility-weighted
/// per-component posterior means.
#[derive(Clone, Debug)]
pub struct GmmDenoiser {
    model: GmmModel,
}

impl GmmDenoiser {
    pub fn new(model: GmmModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &GmmModel {
        &self.model
    }
}

pub fn denoiser_from_gmm(model: GmmModel) -> GmmDenoiser {
    GmmDenoiser::new(model)
}

impl Denoiser for GmmDenoiser {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.evaluate_batch(std::slice::from_ref(&x.to_vec()), sigma)?.remove(0))
    }

    fn evaluate_batch(&self, xs: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        check_sigma(sigma)?;
        for x in xs {
            check_dim(self.dim(), x.len())?;
        }
        let comps = self.model.noised_components(sigma)?;
        xs.iter()
            .map(|x| {
                let r = crate::models::gmm_responsibilities(&comps, x)?;
                let xv = DVector::from_column_slice(x);
                let mut out = DVector::zeros(x.len());
                for ((rk, c), prior) in r.iter().zip(&comps).zip(self.model.components()) {
                    if *rk == 0.0 {
                        continue;
                    }
                    let mu = prior.mean();
                    let post = mu + prior.covariance() * c.model.cholesky().solve(&(&xv - mu));
                    out += post * *rk;
                }
                Ok(out.iter().copied().collect())
            })
            .collect()
    }
}

/// `D(x) = x`; every score and direction it induces is zero.
#[derive(Clone, Copy, Debug)]
pub struct IdentityDenoiser {
    pub dim: usize,
}

impl Denoiser for IdentityDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        check_dim(self.dim, x.len())?;
        Ok(x.to_vec())
    }
}

/// Wraps a denoiser and counts evaluated vectors.
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(x, sigma)
    }
    fn evaluate_batch(&self, xs: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(xs.len(), Ordering::SeqCst);
        self.inner.evaluate_batch(xs, sigma)
    }
}

fn require_positive(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise level must be positive, got {sigma}")))
    }
}

/// `(x - D) / sigma` from an already evaluated denoiser output.
pub(crate) fn direction_from(x: &[f64], denoised: &[f64], sigma: f64) -> Vec<f64> {
    x.iter().zip(denoised).map(|(&xi, &di)| (xi - di) / sigma).collect()
}

/// Score estimate `(D(x; sigma) - x) / sigma^2`.
pub fn score_of(denoiser: &dyn Denoiser, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    require_positive(sigma)?;
    let d = denoiser.evaluate(x, sigma)?;
    let s2 = sigma * sigma;
    Ok(x.iter().zip(&d).map(|(&xi, &di)| (di - xi) / s2).collect())
}

/// PF-ODE direction `dx/dsigma = (x - D(x; sigma)) / sigma`.
pub fn ode_direction(denoiser: &dyn Denoiser, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    require_positive(sigma)?;
    let d = denoiser.evaluate(x, sigma)?;
    Ok(direction_from(x, &d, sigma))
}
