//! Noise-level schedules and the forward perturbation kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normals;

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_STEPS: usize = 50;

/// Strictly decreasing noise levels ending in exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SigmaSchedule {
    levels: Vec<f64>,
}

impl SigmaSchedule {
    /// Wraps explicit levels after checking the schedule invariants.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::invalid("a schedule needs at least two levels"));
        }
        if *levels.last().unwrap() != 0.0 {
            return Err(Error::invalid("the last noise level must be exactly 0"));
        }
        if levels.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("noise levels must be finite"));
        }
        if levels.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("noise levels must be strictly decreasing"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Number of integration steps N (one less than the number of levels).
    pub fn n_steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.levels[i]
    }

    pub fn sigma_max(&self) -> f64 {
        self.levels[0]
    }
}

impl TryFrom<Vec<f64>> for SigmaSchedule {
    type Error = Error;
    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::from_levels(levels)
    }
}

impl From<SigmaSchedule> for Vec<f64> {
    fn from(s: SigmaSchedule) -> Self {
        s.levels
    }
}

/// Karras et al. style polynomial interpolation between `sigma_max` and
/// `sigma_min` in `sigma^(1/rho)` space, with a final level of 0.
pub fn karras_sigmas(n_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
        return Err(Error::invalid(format!(
            "need 0 < sigma_min < sigma_max, got sigma_min={sigma_min}, sigma_max={sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let mut levels = Vec::with_capacity(n_steps + 1);
    if n_steps == 1 {
        levels.push(sigma_max);
    } else {
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let last = (n_steps - 1) as f64;
        for i in 0..n_steps {
            levels.push((hi + (i as f64 / last) * (lo - hi)).powf(rho));
        }
        // pin the endpoints against powf round-off
        levels[0] = sigma_max;
        levels[n_steps - 1] = sigma_min;
    }
    levels.push(0.0);
    SigmaSchedule::from_levels(levels)
}

/// Parameters of a Karras schedule as they appear in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_STEPS,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            rho: DEFAULT_RHO,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<SigmaSchedule> {
        karras_sigmas(self.n_steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

/// `alpha * x + sigma * eps` with `eps` standard normal drawn from `rng`.
pub fn perturb<R: Rng + ?Sized>(x: &[f64], sigma: f64, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.iter().map(|&v| alpha * v).collect());
    }
    let eps = standard_normals(rng, x.len());
    Ok(x.iter().zip(eps).map(|(&v, e)| alpha * v + sigma * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, SeedStreams, StreamKey};

    #[test]
    fn single_step_schedule() {
        let s = karras_sigmas(1, 0.1, 80.0, 7.0).unwrap();
        assert_eq!(s.levels(), &[80.0, 0.0]);
    }

    #[test]
    fn two_step_schedule_hits_endpoints() {
        let s = karras_sigmas(2, 0.1, 80.0, 7.0).unwrap();
        assert_eq!(s.levels(), &[80.0, 0.1, 0.0]);
    }

    #[test]
    fn three_step_midpoint() {
        // ((80^(1/7) + 0.1^(1/7)) / 2)^7 evaluated at 40 digits
        let expected = 6.104_680_239_389_864_653_2;
        let s = karras_sigmas(3, 0.1, 80.0, 7.0).unwrap();
        assert_eq!(s.n_steps(), 3);
        assert_eq!(s.sigma(0), 80.0);
        assert!((s.sigma(1) - expected).abs() < 1e-12, "{}", s.sigma(1));
        assert_eq!(s.sigma(2), 0.1);
        assert_eq!(s.sigma(3), 0.0);
    }

    #[test]
    fn default_schedule_invariants() {
        let s = ScheduleParams::default().build().unwrap();
        assert_eq!(s.levels().len(), 51);
        assert_eq!(s.sigma_max(), 80.0);
        assert_eq!(s.levels()[49], 0.002);
        assert!(s.levels().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(karras_sigmas(10, 0.0, 80.0, 7.0).is_err());
        assert!(karras_sigmas(10, 80.0, 0.1, 7.0).is_err());
        assert!(karras_sigmas(10, -1.0, 80.0, 7.0).is_err());
        assert!(karras_sigmas(0, 0.1, 80.0, 7.0).is_err());
        assert!(karras_sigmas(10, 0.1, 80.0, 0.0).is_err());
    }

    #[test]
    fn from_levels_validates() {
        assert!(SigmaSchedule::from_levels(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(SigmaSchedule::from_levels(vec![1.0, 0.5, 0.1]).is_err());
        assert!(SigmaSchedule::from_levels(vec![1.0, 1.0, 0.0]).is_err());
        assert!(SigmaSchedule::from_levels(vec![0.0]).is_err());
    }

    #[test]
    fn perturb_zero_noise_is_identity() {
        let mut rng = SeedStreams::new(3).stream(StreamKey::new(Purpose::Perturb));
        let x = vec![1.5, -2.0, 0.25];
        assert_eq!(perturb(&x, 0.0, 1.0, &mut rng).unwrap(), x);
        assert!(perturb(&x, -1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn perturb_alpha_zero_is_pure_noise() {
        let streams = SeedStreams::new(11);
        let key = StreamKey::new(Purpose::Perturb);
        let a = perturb(&[5.0, -5.0], 1.5, 0.0, &mut streams.stream(key)).unwrap();
        let b = perturb(&[100.0, 3.0], 1.5, 0.0, &mut streams.stream(key)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_std() {
        let mut rng = SeedStreams::new(5).stream(StreamKey::new(Purpose::Perturb));
        let x = vec![0.0; 100_000];
        let y = perturb(&x, 2.0, 1.0, &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 2.0).abs() < 0.02, "std {std}");
    }

    proptest::proptest! {
        #[test]
        fn karras_levels_decrease_to_zero(n in 1usize..300, lo in 1e-4f64..1.0, ratio in 1.01f64..1e4, rho in 0.5f64..12.0) {
            let s = karras_sigmas(n, lo, lo * ratio, rho).unwrap();
            let l = s.levels();
            proptest::prop_assert_eq!(l.len(), n + 1);
            proptest::prop_assert_eq!(l[0], lo * ratio);
            proptest::prop_assert_eq!(l[n], 0.0);
            proptest::prop_assert!(l.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
