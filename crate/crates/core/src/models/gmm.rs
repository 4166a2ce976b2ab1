use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GaussianModel;
use crate::error::{check_dim, Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// Finite mixture of Gaussians sharing one dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct GmmModel {
    weights: Vec<f64>,
    components: Vec<GaussianModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRepr {
    weights: Vec<f64>,
    components: Vec<GaussianModel>,
}

impl TryFrom<GmmRepr> for GmmModel {
    type Error = Error;
    fn try_from(r: GmmRepr) -> Result<Self> {
        GmmModel::new(r.weights, r.components)
    }
}

impl From<GmmModel> for GmmRepr {
    fn from(g: GmmModel) -> Self {
        GmmRepr {
            weights: g.weights,
            components: g.components,
        }
    }
}

/// Per-component quantities at one noise level.
pub(crate) struct NoisedComponent {
    pub log_weight: f64,
    pub model: GaussianModel,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianModel>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let m = components[0].dim();
        for c in &components {
            check_dim(m, c.dim())?;
        }
        Ok(Self { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianModel] {
        &self.components
    }

    pub(crate) fn noised_components(&self, sigma: f64) -> Result<Vec<NoisedComponent>> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(&w, c)| {
                Ok(NoisedComponent {
                    log_weight: w.ln(),
                    model: c.noised(sigma)?,
                })
            })
            .collect()
    }

    /// Posterior component probabilities of `x` under the noised mixture.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let comps = self.noised_components(sigma)?;
        responsibilities(&comps, x)
    }

    /// log of sum_k w_k N(x; mu_k, Sigma_k + sigma^2 I).
    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let comps = self.noised_components(sigma)?;
        let logs = comps
            .iter()
            .map(|c| Ok(c.log_weight + c.model.log_density(x)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&logs))
    }

    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let comps = self.noised_components(sigma)?;
        let r = responsibilities(&comps, x)?;
        let mut out = DVector::zeros(self.dim());
        for (rk, c) in r.iter().zip(&comps) {
            if *rk == 0.0 {
                continue;
            }
            out += DVector::from_vec(c.model.score(x)?) * *rk;
        }
        Ok(out.iter().copied().collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.components[k].sample(rng)
    }
}

pub(crate) fn responsibilities(comps: &[NoisedComponent], x: &[f64]) -> Result<Vec<f64>> {
    let logs = comps
        .iter()
        .map(|c| {
            if c.log_weight == f64::NEG_INFINITY {
                Ok(f64::NEG_INFINITY)
            } else {
                Ok(c.log_weight + c.model.log_density(x)?)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact score of the noised mixture at `x`.
pub fn gmm_score(model: &GmmModel, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    model.score(x, sigma)
}
