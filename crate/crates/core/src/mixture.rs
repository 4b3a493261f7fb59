//! Closed-form quantities of the diffusion started from a finite training
//! set: posterior weights over the training points, their weighted mean
//! `ȳ`, the score and noise targets, and the four densities of the process.
//!
//! With data `p(x, 0) = (1/N) Σ δ(x - y_i)`, every marginal is a Gaussian
//! mixture centered on the scaled points `α_t y_i`, so nothing here is
//! approximated. All exponents are handled in the log domain.

use std::collections::BTreeMap;
use std::io::Read;

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, sq_dist_scaled, sq_norm, Scalar};
use crate::schedule::{NoiseSchedule, Transition};

/// Finite point set in `R^d` with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<T> {
    dim: usize,
    points: Vec<T>,
    labels: Option<Vec<u32>>,
    all: Vec<usize>,
    classes: BTreeMap<u32, Vec<usize>>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(rows: Vec<Vec<T>>, labels: Option<Vec<u32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::Invalid("training set is empty".into()))?;
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("training points have inconsistent dimensions".into()));
        }
        Self::from_flat(dim, rows.into_iter().flatten().collect(), labels)
    }

    pub fn from_flat(dim: usize, points: Vec<T>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Invalid("training set needs N >= 1 points of dimension d >= 1".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("training points must be finite".into()));
        }
        let n = points.len() / dim;
        let mut classes = BTreeMap::new();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Invalid(format!("{} labels for {n} points", l.len())));
            }
            for (i, &c) in l.iter().enumerate() {
                classes.entry(c).or_insert_with(Vec::new).push(i);
            }
        }
        Ok(Self { dim, points, labels, all: (0..n).collect(), classes })
    }

    /// Reads one point per CSV row. A header row is optional; when present,
    /// a final column named `label` holds integer class ids.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut label_col = false;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Invalid(format!("csv: {e}")))?;
            if i == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
                label_col = rec.iter().last() == Some("label");
                continue;
            }
            let fields: Vec<&str> = rec.iter().collect();
            let (coords, label) = if label_col {
                let (last, rest) = fields.split_last().ok_or_else(|| Error::Invalid("csv: empty row".into()))?;
                let l = last.parse::<u32>().map_err(|_| Error::Invalid(format!("csv row {}: bad label {last:?}", i + 1)))?;
                (rest, Some(l))
            } else {
                (&fields[..], None)
            };
            let row = coords
                .iter()
                .map(|f| f.parse::<f64>().map(T::from_f64))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("csv row {}: {e}", i + 1)))?;
            rows.push(row);
            labels.extend(label);
        }
        Self::new(rows, label_col.then_some(labels))
    }

    /// `{-1, +1}` in one dimension, labelled 0 and 1.
    pub fn two_point() -> Self {
        Self::new(vec![vec![-T::one()], vec![T::one()]], Some(vec![0, 1])).unwrap()
    }

    /// Sixteen-dimensional constant images: class 0 ("dark") is `-1`,
    /// class 1 ("bright") is `+1`.
    pub fn brightness_toy() -> Self {
        Self::new(vec![vec![-T::one(); 16], vec![T::one(); 16]], Some(vec![0, 1])).unwrap()
    }

    /// The 3x3 grid `{-1, 0, 1}^2`, labelled by row.
    pub fn grid_9() -> Self {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (r, yv) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
            for xv in [-1.0, 0.0, 1.0] {
                rows.push(vec![T::from_f64(xv), T::from_f64(yv)]);
                labels.push(r as u32);
            }
        }
        Self::new(rows, Some(labels)).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    /// Indices of the points in `label`'s class, or all points for `None`.
    pub fn select(&self, label: Option<u32>) -> Result<&[usize]> {
        match label {
            None => Ok(&self.all),
            Some(c) => self
                .classes
                .get(&c)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::domain(format!("class {c} has no points"))),
        }
    }

    /// Mean of the selected points.
    pub fn mean(&self, label: Option<u32>) -> Result<Vec<T>> {
        let idx = self.select(label)?;
        let mut m = vec![T::zero(); self.dim];
        for &i in idx {
            for (a, &b) in m.iter_mut().zip(self.point(i)) {
                *a += b;
            }
        }
        let n = T::from_f64(idx.len() as f64);
        m.iter_mut().for_each(|v| *v /= n);
        Ok(m)
    }
}

/// Bound constants for `|y_i - ȳ| ≤ M1` and `|ȳ| ≤ M2 ≤ M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaConstants<T> {
    /// Largest pairwise distance.
    pub m1: T,
    /// Largest point norm.
    pub m2: T,
    pub m: T,
}

pub fn lemma_constants<T: Scalar>(set: &TrainingSet<T>) -> LemmaConstants<T> {
    let n = set.len();
    let mut m1 = T::zero();
    let mut m2 = T::zero();
    for i in 0..n {
        m2 = m2.max(sq_norm(set.point(i)).sqrt());
        for j in i + 1..n {
            m1 = m1.max(sq_dist_scaled(set.point(i), T::one(), set.point(j)).sqrt());
        }
    }
    LemmaConstants { m1, m2, m: m1 + m2 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityKind {
    /// `p(x_t, t)`.
    Marginal,
    /// `p(x_t | x_s)`.
    ForwardCond,
    /// `p(x_s | x_t)`, the exact mixture.
    ReverseExact,
    /// `p̃(x_s | x_t)`, the single Gaussian centered with `ȳ`.
    ReverseGauss,
}

/// Arguments of a density evaluation.
#[derive(Debug, Clone, Copy)]
pub enum DensityQuery<'a, T> {
    Marginal { x: &'a [T], t: T },
    ForwardCond { x_t: &'a [T], t: T, x_s: &'a [T], s: T },
    ReverseExact { x_s: &'a [T], s: T, x_t: &'a [T], t: T },
    ReverseGauss { x_s: &'a [T], s: T, x_t: &'a [T], t: T },
}

impl<T> DensityQuery<'_, T> {
    pub fn kind(&self) -> DensityKind {
        match self {
            DensityQuery::Marginal { .. } => DensityKind::Marginal,
            DensityQuery::ForwardCond { .. } => DensityKind::ForwardCond,
            DensityQuery::ReverseExact { .. } => DensityKind::ReverseExact,
            DensityQuery::ReverseGauss { .. } => DensityKind::ReverseGauss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEps<T> {
    /// `∇ log p(x, t) = (α ȳ - x) / σ²`.
    pub score: Vec<T>,
    /// `(x - α ȳ) / σ`.
    pub eps: Vec<T>,
}

/// The exact reverse kernel `p(x_s | x_t)` as an explicit Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseKernel<T> {
    pub transition: Transition<T>,
    /// Posterior weights `w_i(x_t, t)`, aligned with the selected points.
    pub weights: Vec<T>,
    /// Component means, flattened `n × d`.
    pub means: Vec<T>,
    /// Mean of the Gaussian approximation (`ȳ` substituted for `y_i`).
    pub mean_gauss: Vec<T>,
    /// Shared component stdev `σ_{s|t}`.
    pub stdev: T,
}

/// Training set paired with a noise schedule.
#[derive(Debug, Clone)]
pub struct MixtureModel<T> {
    set: TrainingSet<T>,
    schedule: NoiseSchedule<T>,
}

fn gaussian_log_norm<T: Scalar>(dim: usize, var: T) -> T {
    -T::from_f64(dim as f64) * T::half() * (T::two() * T::PI() * var).ln()
}

impl<T: Scalar> MixtureModel<T> {
    pub fn new(set: TrainingSet<T>, schedule: NoiseSchedule<T>) -> Self {
        Self { set, schedule }
    }

    pub fn set(&self) -> &TrainingSet<T> {
        &self.set
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.set.dim
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() == self.set.dim {
            Ok(())
        } else {
            Err(Error::Invalid(format!("vector of length {} for dimension {}", x.len(), self.set.dim)))
        }
    }

    /// Unnormalized log-weights `-|x - α y_i|² / 2σ²`; requires `σ > 0`.
    fn logits(&self, x: &[T], alpha: T, sigma: T, idx: &[usize]) -> Vec<T> {
        let denom = T::two() * sigma * sigma;
        idx.iter().map(|&i| -sq_dist_scaled(x, alpha, self.set.point(i)) / denom).collect()
    }

    fn nearest_in(&self, x: &[T], alpha: T, idx: &[usize]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (k, &i) in idx.iter().enumerate() {
            let d = sq_dist_scaled(x, alpha, self.set.point(i));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    fn weights_with(&self, x: &[T], alpha: T, sigma: T, idx: &[usize]) -> Vec<T> {
        let n = idx.len();
        if alpha.is_zero() {
            return vec![T::one() / T::from_f64(n as f64); n];
        }
        if sigma.is_zero() {
            let mut w = vec![T::zero(); n];
            w[self.nearest_in(x, alpha, idx)] = T::one();
            return w;
        }
        let mut w = self.logits(x, alpha, sigma, idx);
        let max = w.iter().copied().fold(T::neg_infinity(), T::max);
        w.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total: T = w.iter().copied().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }

    fn ybar_with(&self, x: &[T], alpha: T, sigma: T, label: Option<u32>) -> Result<Vec<T>> {
        let idx = self.set.select(label)?;
        if alpha.is_zero() {
            return self.set.mean(label);
        }
        let w = self.weights_with(x, alpha, sigma, idx);
        let mut out = vec![T::zero(); self.set.dim];
        for (&wi, &i) in w.iter().zip(idx) {
            for (o, &y) in out.iter_mut().zip(self.set.point(i)) {
                *o += wi * y;
            }
        }
        Ok(out)
    }

    /// Posterior weights `w_i(x, t)` over the selected points.
    ///
    /// At `t = 0` the weights are one-hot on the nearest point; where
    /// `α(t) = 0` they are uniform.
    pub fn posterior_weights(&self, x: &[T], t: T, label: Option<u32>) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let idx = self.set.select(label)?;
        Ok(self.weights_with(x, alpha, sigma, idx))
    }

    /// `ȳ(x, t) = Σ w_i y_i`. Equals the class mean where `α(t) = 0`.
    pub fn ybar(&self, x: &[T], t: T, label: Option<u32>) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        self.ybar_with(x, alpha, sigma, label)
    }

    pub fn score_and_eps(&self, x: &[T], t: T, label: Option<u32>) -> Result<ScoreEps<T>> {
        self.check_dim(x)?;
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        if sigma <= T::zero() {
            return Err(Error::domain(format!("score undefined at t = {t} (sigma = 0)")));
        }
        let yb = self.ybar_with(x, alpha, sigma, label)?;
        let var = sigma * sigma;
        let score = x.iter().zip(&yb).map(|(&xi, &y)| (alpha * y - xi) / var).collect();
        let eps = x.iter().zip(&yb).map(|(&xi, &y)| (xi - alpha * y) / sigma).collect();
        Ok(ScoreEps { score, eps })
    }

    /// Analytic Jacobian of the score, row-major `d × d`:
    /// `(α²/σ⁴) Cov_w(y) - I/σ²`.
    pub fn score_jacobian(&self, x: &[T], t: T, label: Option<u32>) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        if sigma <= T::zero() {
            return Err(Error::domain(format!("score undefined at t = {t} (sigma = 0)")));
        }
        let d = self.set.dim;
        let idx = self.set.select(label)?;
        let w = self.weights_with(x, alpha, sigma, idx);
        let yb = self.ybar_with(x, alpha, sigma, label)?;
        let var = sigma * sigma;
        let scale = alpha * alpha / (var * var);
        let mut jac = vec![T::zero(); d * d];
        for (&wi, &i) in w.iter().zip(idx) {
            let y = self.set.point(i);
            for r in 0..d {
                for c in 0..d {
                    jac[r * d + c] += scale * wi * (y[r] - yb[r]) * (y[c] - yb[c]);
                }
            }
        }
        for r in 0..d {
            jac[r * d + r] -= T::one() / var;
        }
        Ok(jac)
    }

    /// Global index of `argmin_j |x - α(t) y_j|`, lowest index on ties.
    pub fn nearest_index(&self, x: &[T], t: T, label: Option<u32>) -> Result<usize> {
        self.check_dim(x)?;
        let alpha = self.schedule.alpha(t)?;
        let idx = self.set.select(label)?;
        Ok(idx[self.nearest_in(x, alpha, idx)])
    }

    /// Components of the exact reverse kernel for `0 < s < t ≤ 1`.
    pub fn reverse_kernel(&self, x_t: &[T], s: T, t: T, label: Option<u32>) -> Result<ReverseKernel<T>> {
        self.check_dim(x_t)?;
        if !(s > T::zero()) {
            return Err(Error::domain(format!("reverse kernel requires s > 0, got {s}")));
        }
        let tr = self.schedule.transition(s, t)?;
        let idx = self.set.select(label)?;
        let weights = self.weights_with(x_t, tr.alpha_t, tr.sigma_t, idx);
        let yb = self.ybar_with(x_t, tr.alpha_t, tr.sigma_t, label)?;
        let (cx, cy) = (tr.mean_coef_x(), tr.mean_coef_y());
        let d = self.set.dim;
        let mut means = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            means.extend(x_t.iter().zip(self.set.point(i)).map(|(&x, &y)| cx * x + cy * y));
        }
        let mean_gauss = x_t.iter().zip(&yb).map(|(&x, &y)| cx * x + cy * y).collect();
        Ok(ReverseKernel { transition: tr, weights, means, mean_gauss, stdev: tr.sigma_s_given_t })
    }

    /// Log-density of the requested kind.
    pub fn log_density(&self, query: DensityQuery<'_, T>, label: Option<u32>) -> Result<T> {
        let d = self.set.dim;
        match query {
            DensityQuery::Marginal { x, t } => {
                self.check_dim(x)?;
                let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
                if sigma <= T::zero() {
                    return Err(Error::DegenerateDensity(
                        "the t = 0 marginal is a sum of Dirac masses and has no density".into(),
                    ));
                }
                let idx = self.set.select(label)?;
                let lg = self.logits(x, alpha, sigma, idx);
                Ok(log_sum_exp(&lg) - T::from_f64(idx.len() as f64).ln() + gaussian_log_norm(d, sigma * sigma))
            }
            DensityQuery::ForwardCond { x_t, t, x_s, s } => {
                self.check_dim(x_t)?;
                self.check_dim(x_s)?;
                let tr = self.schedule.transition(s, t)?;
                let var = tr.beta_hat;
                let q = sq_dist_scaled(x_t, tr.alpha_t_given_s, x_s);
                Ok(-q / (T::two() * var) + gaussian_log_norm(d, var))
            }
            DensityQuery::ReverseExact { x_s, s, x_t, t } => {
                self.check_dim(x_s)?;
                let k = self.reverse_kernel(x_t, s, t, label)?;
                let var = k.stdev * k.stdev;
                let idx = self.set.select(label)?;
                let lw = self.logits(x_t, k.transition.alpha_t, k.transition.sigma_t, idx);
                let lse_w = log_sum_exp(&lw);
                let terms: Vec<T> = lw
                    .iter()
                    .enumerate()
                    .map(|(j, &l)| {
                        let mu = &k.means[j * d..(j + 1) * d];
                        (l - lse_w) - sq_dist_scaled(x_s, T::one(), mu) / (T::two() * var)
                    })
                    .collect();
                Ok(log_sum_exp(&terms) + gaussian_log_norm(d, var))
            }
            DensityQuery::ReverseGauss { x_s, s, x_t, t } => {
                self.check_dim(x_s)?;
                let k = self.reverse_kernel(x_t, s, t, label)?;
                let var = k.stdev * k.stdev;
                Ok(-sq_dist_scaled(x_s, T::one(), &k.mean_gauss) / (T::two() * var) + gaussian_log_norm(d, var))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tab(alpha: f64) -> NoiseSchedule<f64> {
        // α = `alpha` at t = 0.5
        NoiseSchedule::tabular(vec![0.0, 0.5, 1.0], vec![1.0, alpha, 0.0]).unwrap()
    }

    fn set1(v: &[f64]) -> TrainingSet<f64> {
        TrainingSet::new(v.iter().map(|&x| vec![x]).collect(), None).unwrap()
    }

    #[test]
    fn symmetric_weights() {
        let m = MixtureModel::new(set1(&[-1.0, 1.0]), NoiseSchedule::cosine());
        for &t in &[0.01, 0.3, 0.9] {
            let w = m.posterior_weights(&[0.0], t, None).unwrap();
            assert_eq!(w, vec![0.5, 0.5]);
            assert_eq!(m.score_and_eps(&[0.0], t, None).unwrap().score[0], 0.0);
        }
    }

    #[test]
    fn uniform_weights_and_mean_at_terminal_time() {
        let m = MixtureModel::new(set1(&[0.0, 2.0, 7.0]), NoiseSchedule::cosine());
        let w = m.posterior_weights(&[123.0], 1.0, None).unwrap();
        assert!(w.iter().all(|&v| v == 1.0 / 3.0));
        let m2 = MixtureModel::new(set1(&[0.0, 2.0]), NoiseSchedule::cosine());
        assert_eq!(m2.ybar(&[-5.0], 1.0, None).unwrap(), vec![1.0]);
    }

    #[test]
    fn weights_and_ybar_reference_values() {
        // α = 0.8, σ = 0.6, x = 1.6; mpmath: w = (0.027772174706192, 0.972227825293808)
        let m = MixtureModel::new(set1(&[0.0, 2.0]), tab(0.8));
        let w = m.posterior_weights(&[1.6], 0.5, None).unwrap();
        assert_abs_diff_eq!(w[0], 0.027_772_174_706_191_976, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 0.972_227_825_293_808_0, epsilon = 1e-14);
        // brute force: plain unnormalized Gaussians
        let g: Vec<f64> = [0.0f64, 2.0].iter().map(|y| (-(1.6 - 0.8 * y).powi(2) / 0.72).exp()).collect();
        assert_abs_diff_eq!(w[0], g[0] / (g[0] + g[1]), epsilon = 1e-15);
        let yb = m.ybar(&[1.6], 0.5, None).unwrap();
        assert_abs_diff_eq!(yb[0], 1.944_455_650_587_616, epsilon = 1e-14);
    }

    #[test]
    fn single_point_identities() {
        let m = MixtureModel::new(set1(&[2.0]), tab(0.8));
        assert_eq!(m.ybar(&[17.0], 0.5, None).unwrap(), vec![2.0]);
        let se = m.score_and_eps(&[1.6], 0.5, None).unwrap();
        assert_abs_diff_eq!(se.score[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(se.eps[0], 0.0, epsilon = 1e-15);
        let se = m.score_and_eps(&[2.2], 0.5, None).unwrap();
        assert_abs_diff_eq!(se.score[0], -1.666_666_666_666_666_7, epsilon = 1e-12);
        assert_abs_diff_eq!(se.eps[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(se.eps[0], -0.6 * se.score[0], epsilon = 1e-12);
    }

    #[test]
    fn score_undefined_at_zero() {
        let m = MixtureModel::new(set1(&[2.0]), NoiseSchedule::cosine());
        assert!(matches!(m.score_and_eps(&[1.0], 0.0, None), Err(Error::Domain(_))));
    }

    #[test]
    fn nearest_index_rules() {
        let m = MixtureModel::new(set1(&[1.0, 3.0]), tab(0.5));
        assert_eq!(m.nearest_index(&[0.9], 0.5, None).unwrap(), 0);
        assert_eq!(m.nearest_index(&[1.0], 0.5, None).unwrap(), 0);
        assert_eq!(m.nearest_index(&[1.6], 0.5, None).unwrap(), 1);
        assert_eq!(m.nearest_index(&[3.0], 0.0, None).unwrap(), 1);
    }

    #[test]
    fn dirac_weights_at_zero() {
        let m = MixtureModel::new(set1(&[1.0, 3.0]), NoiseSchedule::cosine());
        assert_eq!(m.posterior_weights(&[2.9], 0.0, None).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn lemma_constant_values() {
        let c = lemma_constants(&set1(&[-1.0, 1.0]));
        assert_eq!((c.m1, c.m2, c.m), (2.0, 1.0, 3.0));
        let c = lemma_constants(&set1(&[-4.0]));
        assert_eq!((c.m1, c.m2, c.m), (0.0, 4.0, 4.0));
        let c = lemma_constants(&set1(&[0.0]));
        assert_eq!(c.m, 0.0);
    }

    #[test]
    fn class_restriction() {
        let s = TrainingSet::new(vec![vec![0.0], vec![2.0], vec![10.0]], Some(vec![0, 0, 1])).unwrap();
        let m = MixtureModel::new(s, NoiseSchedule::cosine());
        assert_eq!(m.ybar(&[0.3], 1.0, Some(0)).unwrap(), vec![1.0]);
        assert_eq!(m.ybar(&[0.3], 0.4, Some(1)).unwrap(), vec![10.0]);
        assert_eq!(m.posterior_weights(&[0.3], 0.4, Some(0)).unwrap().len(), 2);
        assert!(matches!(m.ybar(&[0.3], 0.4, Some(5)), Err(Error::Domain(_))));
        assert_eq!(m.nearest_index(&[9.0], 0.0, Some(0)).unwrap(), 1);
    }

    #[test]
    fn single_point_densities() {
        let m = MixtureModel::new(set1(&[0.0]), NoiseSchedule::cosine());
        let sigma: f64 = m.schedule().sigma(0.3).unwrap();
        let lp = m.log_density(DensityQuery::Marginal { x: &[0.7], t: 0.3 }, None).unwrap();
        let direct = -0.49 / (2.0 * sigma * sigma) - 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert_abs_diff_eq!(lp, direct, epsilon = 1e-13);
        let m = MixtureModel::new(set1(&[1.5]), NoiseSchedule::cosine());
        for &(xs, xt, s, t) in &[(0.2, 0.3, 0.2, 0.5), (-1.0, 2.0, 0.7, 1.0), (3.0, 0.1, 0.01, 0.02)] {
            let a = m.log_density(DensityQuery::ReverseExact { x_s: &[xs], s, x_t: &[xt], t }, None).unwrap();
            let b = m.log_density(DensityQuery::ReverseGauss { x_s: &[xs], s, x_t: &[xt], t }, None).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn reverse_exact_matches_term_by_term_sum() {
        // y = {-1, +1}, cosine, s = 0.5, t = 0.6, x_t = 0.3, x_s = 0.2
        let m = MixtureModel::new(TrainingSet::two_point(), NoiseSchedule::cosine());
        let lp = m
            .log_density(DensityQuery::ReverseExact { x_s: &[0.2], s: 0.5, x_t: &[0.3], t: 0.6 }, None)
            .unwrap();
        // mpmath (50 digits), crates/core/oracles/reference_values.py
        assert_abs_diff_eq!(lp, -0.429_763_855_919_806_1, epsilon = 1e-12);
    }

    #[test]
    fn density_domain_errors() {
        let m = MixtureModel::new(TrainingSet::two_point(), NoiseSchedule::cosine());
        assert!(matches!(
            m.log_density(DensityQuery::Marginal { x: &[0.0], t: 0.0 }, None),
            Err(Error::DegenerateDensity(_))
        ));
        assert!(m.log_density(DensityQuery::ReverseExact { x_s: &[0.0], s: 0.0, x_t: &[0.0], t: 0.5 }, None).is_err());
        assert!(m.log_density(DensityQuery::ReverseGauss { x_s: &[0.0], s: 0.6, x_t: &[0.0], t: 0.5 }, None).is_err());
        assert!(m.log_density(DensityQuery::ForwardCond { x_t: &[0.0], t: 0.5, x_s: &[0.0], s: 0.0 }, None).is_ok());
    }

    #[test]
    fn marginal_integrates_to_one() {
        let m = MixtureModel::new(TrainingSet::new(vec![vec![-1.0], vec![0.5], vec![3.0]], None).unwrap(), NoiseSchedule::cosine());
        for &t in &[0.05, 0.4, 0.9, 1.0] {
            let (a, s) = m.schedule().alpha_sigma(t).unwrap();
            let (lo, hi) = (-a - 10.0 * s, 3.0 * a + 10.0 * s);
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * m.log_density(DensityQuery::Marginal { x: &[lo + i as f64 * h], t }, None).unwrap().exp();
            }
            assert_abs_diff_eq!(acc * h / 3.0, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let m = MixtureModel::new(TrainingSet::<f64>::grid_9(), NoiseSchedule::cosine());
        let x = [0.31, -0.47];
        let t = 0.3;
        let jac = m.score_jacobian(&x, t, None).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let sp = m.score_and_eps(&xp, t, None).unwrap().score;
            let sm = m.score_and_eps(&xm, t, None).unwrap().score;
            for r in 0..2 {
                assert_abs_diff_eq!((sp[r] - sm[r]) / (2.0 * h), jac[r * 2 + c], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn csv_loading() {
        let with_labels = "x0,x1,label\n0.0,1.0,0\n2.0,3.0,1\n";
        let s = TrainingSet::<f64>::from_csv(with_labels.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dim(), 2);
        assert_eq!(s.labels(), Some(&[0u32, 1][..]));
        let plain = "1.0,2.0\n3.0,4.0\n5.0,6.0\n";
        let s = TrainingSet::<f64>::from_csv(plain.as_bytes()).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.labels().is_none());
        assert!(TrainingSet::<f64>::from_csv("1.0,2.0\n3.0\n".as_bytes()).is_err());
        assert!(TrainingSet::<f64>::from_csv("".as_bytes()).is_err());
    }

    #[test]
    fn extreme_inputs_do_not_underflow() {
        let m = MixtureModel::new(TrainingSet::<f64>::grid_9(), NoiseSchedule::cosine());
        let w = m.posterior_weights(&[1000.0, -1000.0], 0.01, None).unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    fn grid_model() -> MixtureModel<f64> {
        MixtureModel::new(TrainingSet::new(vec![vec![-1.0, 0.5], vec![2.0, 1.0], vec![0.3, -2.0], vec![0.0, 0.0]], None).unwrap(), NoiseSchedule::cosine())
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex(x0 in -1e3f64..1e3, x1 in -1e3f64..1e3, t in 0.0f64..=1.0) {
            let m = grid_model();
            let w = m.posterior_weights(&[x0, x1], t, None).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ybar_respects_lemma_bounds(x0 in -50f64..50.0, x1 in -50f64..50.0, t in 0.0f64..=1.0) {
            let m = grid_model();
            let c = lemma_constants(m.set());
            let yb = m.ybar(&[x0, x1], t, None).unwrap();
            prop_assert!(sq_norm(&yb).sqrt() <= c.m + 1e-12);
            for i in 0..m.set().len() {
                prop_assert!(sq_dist_scaled(m.set().point(i), 1.0, &yb).sqrt() <= c.m1 + 1e-12);
            }
        }

        #[test]
        fn score_eps_consistency(x0 in -5f64..5.0, x1 in -5f64..5.0, t in 1e-3f64..=1.0) {
            let m = grid_model();
            let (a, s) = m.schedule().alpha_sigma(t).unwrap();
            let yb = m.ybar(&[x0, x1], t, None).unwrap();
            let se = m.score_and_eps(&[x0, x1], t, None).unwrap();
            for k in 0..2 {
                let x = [x0, x1][k];
                prop_assert!((se.score[k] - (a * yb[k] - x) / (s * s)).abs() <= 1e-12 * (1.0 + se.score[k].abs()));
                prop_assert!((se.eps[k] + s * se.score[k]).abs() <= 1e-12 * (1.0 + se.eps[k].abs()));
            }
        }

        #[test]
        fn bayes_identity(xs in -3f64..3.0, xt in -3f64..3.0, s in 0.01f64..0.98, dt in 0.005f64..0.5) {
            let t = (s + dt).min(0.99);
            let m = MixtureModel::new(TrainingSet::two_point(), NoiseSchedule::cosine());
            let lhs = m.log_density(DensityQuery::ForwardCond { x_t: &[xt], t, x_s: &[xs], s }, None).unwrap()
                + m.log_density(DensityQuery::Marginal { x: &[xs], t: s }, None).unwrap();
            let rhs = m.log_density(DensityQuery::ReverseExact { x_s: &[xs], s, x_t: &[xt], t }, None).unwrap()
                + m.log_density(DensityQuery::Marginal { x: &[xt], t }, None).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }
}
