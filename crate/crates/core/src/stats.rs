//! Two-sample and goodness-of-fit statistics used by the verification
//! harness. Reductions run in a fixed order, so results are reproducible
//! whatever the thread count.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::samplers::chain_rng;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// One-sample Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (((i + 1) as f64 / n) - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at significance `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Sample mean and unbiased variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let n = a.len() as f64;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    cov / (va * vb).sqrt()
}

/// `Σ_{i<j} |x_i - x_j|` for scalars, via sorting.
fn pairwise_abs_sum_1d(v: &[f64]) -> f64 {
    let mut xs = v.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().map(|(j, &x)| x * (2.0 * j as f64 - n + 1.0)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Flat row-major batch of `d`-dimensional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Invalid("batch length is not a multiple of its dimension".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dim = 0;
        for r in rows {
            dim = r.len();
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn within_sum(b: &Batch) -> f64 {
    if b.dim == 1 {
        return pairwise_abs_sum_1d(&b.data);
    }
    let n = b.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| dist(b.row(i), b.row(j))).sum())
        .collect();
    rows.iter().sum()
}

fn cross_sum(a: &Batch, b: &Batch) -> f64 {
    if a.dim == 1 {
        let mut pooled = a.data.clone();
        pooled.extend_from_slice(&b.data);
        return pairwise_abs_sum_1d(&pooled) - pairwise_abs_sum_1d(&a.data) - pairwise_abs_sum_1d(&b.data);
    }
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| (0..b.len()).map(|j| dist(a.row(i), b.row(j))).sum())
        .collect();
    rows.iter().sum()
}

/// Energy distance `2E|a-b| - E|a-a'| - E|b-b'|` with U-statistic
/// within-sample terms.
pub fn energy_distance(a: &Batch, b: &Batch) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Invalid(format!("energy distance between dimensions {} and {}", a.dim, b.dim)));
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    if n < 2.0 || m < 2.0 {
        return Err(Error::Invalid("energy distance needs at least two samples per batch".into()));
    }
    let xy = cross_sum(a, b) / (n * m);
    let xx = 2.0 * within_sum(a) / (n * (n - 1.0));
    let yy = 2.0 * within_sum(b) / (m * (m - 1.0));
    Ok(2.0 * xy - xx - yy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95% quantile of the permutation null.
    pub null_q95: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Permutation test for the energy distance.
pub fn energy_permutation_test(a: &Batch, b: &Batch, permutations: usize, seed: u64) -> Result<PermutationTest> {
    let statistic = energy_distance(a, b)?;
    let d = a.dim;
    let n = a.len();
    let pooled: Vec<&[f64]> = (0..n).map(|i| a.row(i)).chain((0..b.len()).map(|j| b.row(j))).collect();
    let mut null: Vec<f64> = (0..permutations as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = chain_rng(seed, k);
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.shuffle(&mut rng);
            let left = Batch { dim: d, data: idx[..n].iter().flat_map(|&i| pooled[i].iter().copied()).collect() };
            let right = Batch { dim: d, data: idx[n..].iter().flat_map(|&i| pooled[i].iter().copied()).collect() };
            energy_distance(&left, &right)
        })
        .collect::<Result<_>>()?;
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    null.sort_by(f64::total_cmp);
    let q = ((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(PermutationTest {
        statistic,
        null_q95: null[q],
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}
