use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::serde_mat;
use crate::error::{check_dim, Error, Result};
use crate::rng::standard_normals;

const SYMMETRY_TOL: f64 = 1e-12;
/// Factor diagonals below this are treated as singular.
pub(crate) const MIN_FACTOR_DIAG: f64 = 1e-10;

/// Multivariate normal with a cached Cholesky factor of its covariance.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRepr {
    mean: Vec<f64>,
    #[serde(with = "serde_mat")]
    covariance: DMatrix<f64>,
}

impl TryFrom<GaussianRepr> for GaussianModel {
    type Error = Error;
    fn try_from(r: GaussianRepr) -> Result<Self> {
        GaussianModel::new(DVector::from_vec(r.mean), r.covariance)
    }
}

impl From<GaussianModel> for GaussianRepr {
    fn from(g: GaussianModel) -> Self {
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            covariance: g.cov,
        }
    }
}

pub(crate) fn factorize(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::DegenerateModel("covariance is not positive definite".into()))?;
    let min_diag = chol.l_dirty().diagonal().min();
    if !(min_diag > MIN_FACTOR_DIAG) {
        return Err(Error::DegenerateModel(format!(
            "covariance is near-singular (smallest factor diagonal {min_diag:e})"
        )));
    }
    Ok(chol)
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 {
            return Err(Error::invalid("empty Gaussian"));
        }
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian parameters"));
        }
        for i in 0..m {
            for j in 0..i {
                let (a, b) = (cov[(i, j)], cov[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid(format!(
                        "covariance is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let chol = factorize(&cov)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn from_parts(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(mean), cov)
    }

    pub fn standard(m: usize) -> Result<Self> {
        Self::new(DVector::zeros(m), DMatrix::identity(m, m))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let r = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("factor diagonal checked at construction");
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let m = self.dim() as f64;
        Ok(-0.5 * (z.norm_squared() + log_det + m * (2.0 * std::f64::consts::PI).ln()))
    }

    /// `-Sigma^{-1} (x - mu)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let r = DVector::from_column_slice(x) - &self.mean;
        Ok((-self.chol.solve(&r)).iter().copied().collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_vec(standard_normals(rng, self.dim()));
        (&self.mean + self.chol.l_dirty().lower_triangle() * z)
            .iter()
            .copied()
            .collect()
    }

    /// Distribution of `x + sigma * eps`: covariance shifted by `sigma^2 I`.
    pub fn noised(&self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let mut cov = self.cov.clone();
        for i in 0..self.dim() {
            cov[(i, i)] += sigma * sigma;
        }
        Self::new(self.mean.clone(), cov)
    }

    /// Marginal over the listed coordinates, in the listed order.
    pub fn select(&self, coords: &[usize]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("empty coordinate selection"));
        }
        if let Some(&bad) = coords.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::IndexOutOfRange(format!(
                "coordinate {bad} in a {}-dimensional model",
                self.dim()
            )));
        }
        let mean = DVector::from_iterator(coords.len(), coords.iter().map(|&c| self.mean[c]));
        let cov = DMatrix::from_fn(coords.len(), coords.len(), |a, b| self.cov[(coords[a], coords[b])]);
        Self::new(mean, cov)
    }
}

pub fn joint_score(model: &GaussianModel, x: &[f64]) -> Result<Vec<f64>> {
    model.score(x)
}

pub fn noised_model(model: &GaussianModel, sigma: f64) -> Result<GaussianModel> {
    model.noised(sigma)
}
