//! Sample statistics used by the scenarios.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_dim, Error, Result};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("energy distance needs non-empty sample sets"));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(d, x.len())?;
    }
    Ok(d)
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|`, with every
/// expectation taken over all ordered pairs of the given samples.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b)?;
    let mean_dist = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let s: f64 = u.iter().map(|x| v.iter().map(|y| euclid(x, y)).sum::<f64>()).sum();
        s / (u.len() * v.len()) as f64
    };
    Ok(2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))
}

/// Sum of `|x_i - x_j|` over unordered pairs of sorted values.
fn pair_sum_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, v)| v * (2.0 * k as f64 - n + 1.0))
        .sum()
}

/// Energy distance of scalar samples in `O(n log n)`.
pub fn energy_distance_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("energy distance needs non-empty sample sets"));
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let mut all = [a, b].concat();
    all.sort_by(f64::total_cmp);
    let (wa, wb) = (pair_sum_sorted(&sa), pair_sum_sorted(&sb));
    let cross = pair_sum_sorted(&all) - wa - wb;
    let (n, m) = (a.len() as f64, b.len() as f64);
    Ok(2.0 * cross / (n * m) - 2.0 * wa / (n * n) - 2.0 * wb / (m * m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// `(1 + #{permuted >= observed}) / (1 + permutations)`.
    pub p_value: f64,
}

fn p_value(observed: f64, permuted: impl Iterator<Item = f64>, n_perm: usize) -> f64 {
    let hits = permuted.filter(|&s| s >= observed).count();
    (1 + hits) as f64 / (1 + n_perm) as f64
}

/// Permutation test of equal distributions using the energy distance.
pub fn energy_permutation_test<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_perm: usize,
    rng: &mut R,
) -> Result<PermutationTest> {
    check_samples(a, b)?;
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pooled.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclid(pooled[i], pooled[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let na = a.len();
    let stat = |labels: &[usize]| {
        let (ia, ib) = labels.split_at(na);
        let block = |u: &[usize], v: &[usize]| {
            let s: f64 = u.iter().map(|&i| v.iter().map(|&j| dist[i * n + j]).sum::<f64>()).sum();
            s / (u.len() * v.len()) as f64
        };
        2.0 * block(ia, ib) - block(ia, ia) - block(ib, ib)
    };
    let mut labels: Vec<usize> = (0..n).collect();
    let statistic = stat(&labels);
    let permuted: Vec<f64> = (0..n_perm)
        .map(|_| {
            labels.shuffle(rng);
            stat(&labels)
        })
        .collect();
    Ok(PermutationTest {
        statistic,
        p_value: p_value(statistic, permuted.into_iter(), n_perm),
    })
}

/// Scalar permutation test in `O(n)` per permutation after one sort.
pub fn energy_permutation_test_1d<R: Rng + ?Sized>(
    a: &[f64],
    b: &[f64],
    n_perm: usize,
    rng: &mut R,
) -> Result<PermutationTest> {
    let statistic = energy_distance_1d(a, b)?;
    let mut all = [a, b].concat();
    all.sort_by(f64::total_cmp);
    let total = pair_sum_sorted(&all);
    let (na, nb) = (a.len(), b.len());
    let mut in_a: Vec<bool> = (0..all.len()).map(|k| k < na).collect();
    let mut permuted = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        in_a.shuffle(rng);
        let (mut wa, mut wb, mut ka, mut kb) = (0.0, 0.0, 0.0, 0.0);
        for (v, &flag) in all.iter().zip(&in_a) {
            if flag {
                wa += v * (2.0 * ka - na as f64 + 1.0);
                ka += 1.0;
            } else {
                wb += v * (2.0 * kb - nb as f64 + 1.0);
                kb += 1.0;
            }
        }
        let (n, m) = (na as f64, nb as f64);
        permuted.push(2.0 * (total - wa - wb) / (n * m) - 2.0 * wa / (n * n) - 2.0 * wb / (m * m));
    }
    Ok(PermutationTest {
        statistic,
        p_value: p_value(statistic, permuted.into_iter(), n_perm),
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile bootstrap interval for the mean at two-sided `level`.
pub fn bootstrap_mean_ci<R: Rng + ?Sized>(xs: &[f64], level: f64, n_boot: usize, rng: &mut R) -> Result<(f64, f64)> {
    if xs.is_empty() || n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap needs data, draws, and a level in (0, 1)"));
    }
    let n = xs.len();
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * n_boot as f64).floor() as usize).min(n_boot - 1)];
    Ok((at(tail), at(1.0 - tail)))
}

/// `(skewness^2 + 1) / kurtosis` from population moments. Values above 5/9
/// point to bimodality.
pub fn bimodality_coefficient(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::invalid("bimodality coefficient needs at least two values"));
    }
    let mu = mean(xs);
    let moment = |p: i32| xs.iter().map(|x| (x - mu).powi(p)).sum::<f64>() / xs.len() as f64;
    let (m2, m3, m4) = (moment(2), moment(3), moment(4));
    if !(m2 > 0.0) {
        return Err(Error::invalid("bimodality coefficient of constant data"));
    }
    let skew2 = m3 * m3 / (m2 * m2 * m2);
    Ok((skew2 + 1.0) / (m4 / (m2 * m2)))
}

/// Pearson correlation.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_dim(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::invalid("correlation needs at least two pairs"));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::invalid("correlation of constant data"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
