//! Numerical checks of the error bounds and sampling identities.
//!
//! The L1 gap between the exact reverse kernel (a Gaussian mixture) and its
//! single-Gaussian approximation is computed by composite Simpson
//! quadrature in one dimension and by importance sampling otherwise. The
//! bound constants are existential, so sweeps report the largest observed
//! ratio over the grid rather than asserting a universal value.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::init_trainer::InitModel;
use crate::mixture::{lemma_constants, DensityQuery};
use crate::samplers::{chain_rng, initial_step, run_chain, FinalMode, InitMode, Method, Record};
pub use crate::stats::{energy_distance, energy_permutation_test, Batch, PermutationTest};
use crate::stats::{correlation, ks_critical, ks_statistic, mean_var, normal_cdf};
use crate::{MixtureModel, SamplerConfig};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatReport {
    pub check: String,
    pub sample_size: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl StatReport {
    fn below(check: impl Into<String>, n: usize, statistic: f64, threshold: f64) -> Self {
        Self { check: check.into(), sample_size: n, statistic, threshold, pass: statistic < threshold, note: None }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Writes `check,sample_size,statistic,threshold,pass,note`.
pub fn write_stat_csv<W: Write>(reports: &[StatReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    wr.write_record(["check", "sample_size", "statistic", "threshold", "pass", "note"]).map_err(io)?;
    for r in reports {
        wr.write_record([
            r.check.clone(),
            r.sample_size.to_string(),
            r.statistic.to_string(),
            r.threshold.to_string(),
            r.pass.to_string(),
            r.note.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    wr.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(())
}

/// `{check: {pass, statistic, threshold}}`.
pub fn summary_json(reports: &[StatReport]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for r in reports {
        map.insert(
            r.check.clone(),
            serde_json::json!({ "pass": r.pass, "statistic": r.statistic, "threshold": r.threshold }),
        );
    }
    serde_json::Value::Object(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadConfig {
    /// Initial Simpson panel count (even).
    pub panels: usize,
    pub max_panels: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Monte Carlo sample count for `d ≥ 2`.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self { panels: 16, max_panels: 1 << 20, rel_tol: 1e-8, abs_tol: 1e-15, mc_samples: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    pub value: f64,
    /// Refinement difference for quadrature, standard error for Monte Carlo.
    pub error: f64,
}

fn simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..panels {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Simpson with panel doubling until the refinement difference meets the
/// tolerance. Fails if the difference stops halving before that.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, q: &QuadConfig) -> Result<GapEstimate> {
    let mut n = q.panels.max(2) & !1;
    let mut prev = simpson(f, lo, hi, n);
    let mut prev_err = f64::INFINITY;
    let mut stalled = 0;
    loop {
        n *= 2;
        let cur = simpson(f, lo, hi, n);
        let err = (cur - prev).abs();
        if err <= q.rel_tol * cur.abs() || err <= q.abs_tol {
            return Ok(GapEstimate { value: cur, error: err });
        }
        stalled = if err > 0.5 * prev_err { stalled + 1 } else { 0 };
        if stalled >= 2 || n >= q.max_panels {
            return Err(Error::QuadratureUnconverged(format!(
                "error estimate {err:e} at {n} panels did not halve under refinement (value {cur:e})"
            )));
        }
        prev = cur;
        prev_err = err;
    }
}

/// Sign-change scan resolution for `integrate_abs`.
const ROOT_SCAN: usize = 4096;

/// `∫ |f|` over `[lo, hi]`: the range is cut at the sign changes of `f`
/// (located by bisection) so each piece is smooth for Simpson.
fn integrate_abs(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, q: &QuadConfig) -> Result<GapEstimate> {
    let h = (hi - lo) / ROOT_SCAN as f64;
    let mut cuts = vec![lo];
    let mut prev = f(lo);
    for i in 1..=ROOT_SCAN {
        let x = if i == ROOT_SCAN { hi } else { lo + i as f64 * h };
        let v = f(x);
        if (prev < 0.0) != (v < 0.0) && prev != 0.0 && v != 0.0 {
            let (mut a, mut b, fa) = (x - h, x, prev);
            while b - a > f64::EPSILON * a.abs().max(b.abs()).max(1e-300) {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if (f(mid) < 0.0) == (fa < 0.0) {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            cuts.push(0.5 * (a + b));
        }
        prev = v;
    }
    cuts.push(hi);
    let abs_f = |x: f64| f(x).abs();
    let mut total = GapEstimate { value: 0.0, error: 0.0 };
    for w in cuts.windows(2) {
        let piece = adaptive_simpson(&abs_f, w[0], w[1], q)?;
        total.value += piece.value;
        total.error += piece.error;
    }
    Ok(total)
}

/// `∫ |p(x_s | x_t) - p̃(x_s | x_t)| dx_s` for `0 < s < t ≤ 1`.
pub fn l1_gap(m: &MixtureModel, x_t: &[f64], s: f64, t: f64, label: Option<u32>, q: &QuadConfig) -> Result<GapEstimate> {
    let k = m.reverse_kernel(x_t, s, t, label)?;
    let d = m.dim();
    let sd = k.stdev;
    if !(sd > 0.0) {
        return Err(Error::domain("reverse kernel has zero variance"));
    }
    let var2 = 2.0 * sd * sd;
    // p - p̃ = p̃ Σ w_i (exp(Δ_i) - 1), Δ_i = log N_i - log Ñ
    let ratio_minus_one = |x: &[f64]| -> f64 {
        let qb: f64 = x.iter().zip(&k.mean_gauss).map(|(a, b)| (a - b) * (a - b)).sum();
        k.weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mu = &k.means[i * d..(i + 1) * d];
                let qi: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                w * ((qb - qi) / var2).exp_m1()
            })
            .sum()
    };
    if d == 1 {
        let mg = k.mean_gauss[0];
        let lo = k.means.iter().copied().fold(mg, f64::min) - 10.0 * sd;
        let hi = k.means.iter().copied().fold(mg, f64::max) + 10.0 * sd;
        let norm = (std::f64::consts::PI * var2).sqrt();
        let f = |x: f64| (-(x - mg) * (x - mg) / var2).exp() / norm * ratio_minus_one(&[x]);
        return integrate_abs(&f, lo, hi, q);
    }
    let mut rng = chain_rng(q.seed, 0);
    let vals: Vec<f64> = (0..q.mc_samples)
        .map(|_| {
            let x: Vec<f64> = k.mean_gauss.iter().map(|&mu| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            ratio_minus_one(&x).abs()
        })
        .collect();
    let (mean, var) = mean_var(&vals);
    Ok(GapEstimate { value: mean, error: (var / vals.len() as f64).sqrt() })
}

/// `∫ |p(x, t) - p̃(x, t)| dx` with `p̃(x, t) = N(x; α ȳ(x, t), σ²)`.
pub fn terminal_marginal_gap(m: &MixtureModel, t: f64, q: &QuadConfig) -> Result<GapEstimate> {
    let (alpha, sigma) = m.schedule().alpha_sigma(t)?;
    if !(sigma > 0.0) {
        return Err(Error::domain("terminal marginal gap needs sigma > 0"));
    }
    let d = m.dim();
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let approx = |x: &[f64]| -> Result<f64> {
        let yb = m.ybar(x, t, None)?;
        let qd: f64 = x.iter().zip(&yb).map(|(a, b)| (a - alpha * b).powi(2)).sum();
        Ok(log_norm - qd / (2.0 * sigma * sigma))
    };
    if d == 1 {
        let m2 = lemma_constants(m.set()).m2;
        let lo = -alpha * m2 - 10.0 * sigma;
        let f = |x: f64| {
            let lp = m.log_density(DensityQuery::Marginal { x: &[x], t }, None).unwrap_or(f64::NEG_INFINITY);
            let la = approx(&[x]).unwrap_or(f64::NEG_INFINITY);
            lp.exp() - la.exp()
        };
        return integrate_abs(&f, lo, -lo, q);
    }
    // importance sampling from p itself
    let mut rng = chain_rng(q.seed, 1);
    let n_pts = m.set().len();
    let mut vals = Vec::with_capacity(q.mc_samples);
    for _ in 0..q.mc_samples {
        let y = m.set().point(rng.gen_range(0..n_pts));
        let x: Vec<f64> = y.iter().map(|&v| alpha * v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let lp = m.log_density(DensityQuery::Marginal { x: &x, t }, None)?;
        vals.push((1.0 - (approx(&x)? - lp).exp()).abs());
    }
    let (mean, var) = mean_var(&vals);
    Ok(GapEstimate { value: mean, error: (var / vals.len() as f64).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Fixed `s`, `t` sweeping down toward `s`; ratio `gap/√σ_{s|t}`.
    Prop1,
    /// Fixed `t` (normally 1), `s` sweeping up toward 1; ratio `gap/√α_s`.
    Prop2,
    /// Marginal gap near `t = 1`; ratio `gap/√α_t`.
    TerminalMarginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    /// Prop1: one entry, the fixed `s`. Prop2: the `s` values.
    pub s: Vec<f64>,
    /// Prop1 and TerminalMarginal: the swept times. Prop2: one entry, the fixed `t`.
    pub t: Vec<f64>,
    /// `x_t` probes (ignored by TerminalMarginal).
    pub probes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub s: f64,
    pub t: f64,
    pub probe: Option<Vec<f64>>,
    pub gap: f64,
    pub sigma_s_given_t: f64,
    pub alpha_s: f64,
    pub ratio_sqrt_sigma: f64,
    pub ratio_sqrt_alpha: f64,
    /// `gap / σ_{s|t}^{2/3}`, the sharper exponent.
    pub ratio_sigma_two_thirds: f64,
    pub quad_error: f64,
    /// Quadrature error is not below `gap/10`; excluded from the fit.
    pub flagged: bool,
}

impl BoundRow {
    /// The ratio bounded by the sweep's proposition.
    pub fn primary_ratio(&self, kind: SweepKind) -> f64 {
        match kind {
            SweepKind::Prop1 => self.ratio_sqrt_sigma,
            SweepKind::Prop2 | SweepKind::TerminalMarginal => self.ratio_sqrt_alpha,
        }
    }
}

/// Per-probe trend diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub probe: Option<Vec<f64>>,
    /// Largest over smallest primary ratio on retained rows.
    pub ratio_band: f64,
    /// Gap at the far end of the sweep over gap at the near end.
    pub gap_fall: f64,
    /// Gap decreases toward the limit (allowing `rel_slack` noise).
    pub monotone: bool,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub kind: SweepKind,
    pub rows: Vec<BoundRow>,
    /// Largest primary ratio over retained rows.
    pub fitted_c: f64,
    pub probes: Vec<ProbeSummary>,
}

impl BoundReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        wr.write_record([
            "s", "t", "probe", "gap", "sigma_s_given_t", "alpha_s", "ratio_sqrt_sigma", "ratio_sqrt_alpha",
            "ratio_sigma_two_thirds", "quad_error", "flagged",
        ])
        .map_err(io)?;
        for r in &self.rows {
            let probe = r.probe.as_ref().map_or(String::new(), |p| {
                p.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
            });
            wr.write_record([
                r.s.to_string(),
                r.t.to_string(),
                probe,
                r.gap.to_string(),
                r.sigma_s_given_t.to_string(),
                r.alpha_s.to_string(),
                r.ratio_sqrt_sigma.to_string(),
                r.ratio_sqrt_alpha.to_string(),
                r.ratio_sigma_two_thirds.to_string(),
                r.quad_error.to_string(),
                r.flagged.to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        Ok(())
    }
}

fn bound_row(m: &MixtureModel, s: f64, t: f64, probe: Option<&Vec<f64>>, q: &QuadConfig) -> Result<BoundRow> {
    let (gap, alpha_s, sst) = match probe {
        Some(x) => {
            let g = l1_gap(m, x, s, t, None, q)?;
            let tr = m.schedule().transition(s, t)?;
            (g, tr.alpha_s, tr.sigma_s_given_t)
        }
        None => (terminal_marginal_gap(m, t, q)?, m.schedule().alpha(t)?, f64::NAN),
    };
    Ok(BoundRow {
        s,
        t,
        probe: probe.cloned(),
        gap: gap.value,
        sigma_s_given_t: sst,
        alpha_s,
        ratio_sqrt_sigma: gap.value / sst.sqrt(),
        ratio_sqrt_alpha: gap.value / alpha_s.sqrt(),
        ratio_sigma_two_thirds: gap.value / sst.powf(2.0 / 3.0),
        quad_error: gap.error,
        flagged: !(gap.error < gap.value / 10.0),
    })
}

/// Relative slack tolerated by the monotone-trend diagnostic.
const MONOTONE_SLACK: f64 = 1e-6;

/// Tabulates the gap and its bound ratios over a grid.
pub fn bound_sweep(m: &MixtureModel, kind: SweepKind, grid: &SweepGrid, q: &QuadConfig) -> Result<BoundReport> {
    let mut jobs: Vec<(f64, f64, Option<&Vec<f64>>)> = Vec::new();
    match kind {
        SweepKind::Prop1 => {
            let s = *grid.s.first().ok_or_else(|| Error::Invalid("prop1 sweep needs s".into()))?;
            for p in &grid.probes {
                jobs.extend(grid.t.iter().map(|&t| (s, t, Some(p))));
            }
        }
        SweepKind::Prop2 => {
            let t = grid.t.first().copied().unwrap_or(1.0);
            for p in &grid.probes {
                jobs.extend(grid.s.iter().map(|&s| (s, t, Some(p))));
            }
        }
        SweepKind::TerminalMarginal => jobs.extend(grid.t.iter().map(|&t| (f64::NAN, t, None))),
    }
    let rows: Vec<BoundRow> = jobs.par_iter().map(|&(s, t, p)| bound_row(m, s, t, p, q)).collect::<Result<_>>()?;

    let retained = |r: &BoundRow| !r.flagged && r.gap > 0.0;
    let fitted_c = rows.iter().filter(|r| retained(r)).map(|r| r.primary_ratio(kind)).fold(0.0, f64::max);

    let mut probes = Vec::new();
    let probe_keys: Vec<Option<Vec<f64>>> = match kind {
        SweepKind::TerminalMarginal => vec![None],
        _ => grid.probes.iter().cloned().map(Some).collect(),
    };
    for key in probe_keys {
        let mut sel: Vec<&BoundRow> = rows.iter().filter(|r| r.probe == key).collect();
        // order from the far end of the sweep toward the limit
        match kind {
            SweepKind::Prop1 => sel.sort_by(|a, b| b.t.total_cmp(&a.t)),
            SweepKind::Prop2 => sel.sort_by(|a, b| a.s.total_cmp(&b.s)),
            SweepKind::TerminalMarginal => sel.sort_by(|a, b| a.t.total_cmp(&b.t)),
        }
        let kept: Vec<&&BoundRow> = sel.iter().filter(|r| retained(r)).collect();
        let ratios: Vec<f64> = kept.iter().map(|r| r.primary_ratio(kind)).collect();
        let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
        let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let gap_fall = match (sel.first(), sel.last()) {
            (Some(a), Some(b)) => a.gap / b.gap,
            _ => f64::NAN,
        };
        let monotone = sel.windows(2).all(|w| w[1].gap <= w[0].gap * (1.0 + MONOTONE_SLACK) + w[0].quad_error);
        probes.push(ProbeSummary { probe: key, ratio_band: max_ratio / min_ratio, gap_fall, monotone, max_ratio });
    }
    Ok(BoundReport { kind, rows, fitted_c, probes })
}

/// Below this `α_{1-ε}` inverting the initial step is flagged ill-conditioned.
pub const ILL_CONDITIONED_ALPHA: f64 = 1e-6;

/// Checks that a naive `N(0, I)` start at `1 - ε` implies a standard normal
/// `ȳ(x_1, 1)`, and that the one-step start implies the constant class mean.
///
/// For the naive start `x_1` is drawn from its Gaussian conditional given
/// `x_{1-ε}` (`N(σ x_{1-ε}, α² I)`), which is the coupling under which
/// `x_{1-ε} = α ȳ + σ x_1` with `ȳ` independent of `x_1`.
pub fn prop3_check(m: &MixtureModel, epsilon: f64, n: usize, seed: u64, label: Option<u32>) -> Result<Vec<StatReport>> {
    let (alpha, sigma) = m.schedule().alpha_sigma(1.0 - epsilon)?;
    let d = m.dim();
    let ill = alpha < ILL_CONDITIONED_ALPHA;
    let mut rng = chain_rng(seed, 0);
    let mut implied = vec![Vec::with_capacity(n); d];
    let mut x1s = vec![Vec::with_capacity(n); d];
    for _ in 0..n {
        for k in 0..d {
            let x = rng.sample::<f64, _>(StandardNormal);
            let x1 = sigma * x + alpha * rng.sample::<f64, _>(StandardNormal);
            implied[k].push((x - sigma * x1) / alpha);
            x1s[k].push(x1);
        }
    }
    let mut max_mean = 0.0f64;
    let mut max_var_dev = 0.0f64;
    let mut max_corr = 0.0f64;
    for k in 0..d {
        let (mean, var) = mean_var(&implied[k]);
        max_mean = max_mean.max(mean.abs());
        max_var_dev = max_var_dev.max((var - 1.0).abs());
        max_corr = max_corr.max(correlation(&implied[k], &x1s[k]).abs());
    }
    let mut out = vec![
        StatReport::below("prop3_naive_mean", n, max_mean, 0.02),
        StatReport::below("prop3_naive_variance", n, max_var_dev, 0.02)
            .with_note("max |var - 1| over dimensions; pass means variance in [0.98, 1.02]"),
        StatReport::below("prop3_naive_independence", n, max_corr, 4.0 / (n as f64).sqrt())
            .with_note("max |corr(implied ybar, x1)|"),
    ];

    // one-step start with the exact class mean
    let target = m.set().mean(label)?;
    let mut max_dev = 0.0f64;
    let mut sing_vals = vec![Vec::with_capacity(n); d];
    for _ in 0..n {
        let st = initial_step(m, InitMode::SingStep, Method::Ddim, label, None, None, epsilon, &mut rng)?;
        let x1 = st.x1.expect("one-step start records x1");
        for k in 0..d {
            let v = (st.x_one_minus_eps[k] - sigma * x1[k]) / alpha;
            max_dev = max_dev.max((v - target[k]).abs());
            sing_vals[k].push(v);
        }
    }
    // the spread bounds the variance without the rounding of a summed mean
    let spread = sing_vals
        .iter()
        .map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    out.push(StatReport::below("prop3_sing_step_mean_deviation", n, max_dev, 1e-12));
    out.push(
        StatReport::below("prop3_sing_step_spread", n, spread, 1e-12)
            .with_note("max - min of the implied value per dimension; the variance is at most its square"),
    );
    if ill {
        for r in &mut out {
            r.pass = false;
            r.note = Some(format!("ill-conditioned: alpha(1 - eps) = {alpha:e} < {ILL_CONDITIONED_ALPHA:e}"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyKind {
    Bayes,
    Marginal,
    ReverseFromOne,
    TerminalGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySpec {
    pub samples: usize,
    pub seed: u64,
    /// Marginal: KS times. ReverseFromOne: `s` values. TerminalGaussian:
    /// increasing times toward 1.
    pub times: Vec<f64>,
    /// `x_1` probes for ReverseFromOne.
    pub probes: Vec<f64>,
    /// Evaluation coordinates; a value `g` means the point `(g, …, g)`.
    pub grid: Vec<f64>,
}

impl Default for ConsistencySpec {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            times: vec![0.25, 0.5, 0.75],
            probes: vec![-2.0, 0.0, 1.5],
            grid: (0..=80).map(|i| -4.0 + 0.1 * i as f64).collect(),
        }
    }
}

/// Threshold for the Bayes-identity relative residual.
pub const BAYES_TOL: f64 = 1e-10;
/// Threshold for `|log p(x_s | x_1) - log p(x_s, s)|`.
pub const REVERSE_FROM_ONE_TOL: f64 = 1e-12;

pub fn consistency_checks(m: &MixtureModel, kind: ConsistencyKind, spec: &ConsistencySpec) -> Result<Vec<StatReport>> {
    let d = m.dim();
    let n_pts = m.set().len();
    let mut rng = chain_rng(spec.seed, 0);
    match kind {
        ConsistencyKind::Bayes => {
            let mut worst = 0.0f64;
            for _ in 0..spec.samples {
                let s = rng.gen_range(0.01..0.98);
                let t = rng.gen_range(s + 1e-3..0.99);
                let y = m.set().point(rng.gen_range(0..n_pts));
                let (a_s, s_s) = m.schedule().alpha_sigma(s)?;
                let x_s: Vec<f64> = y.iter().map(|&v| a_s * v + s_s * rng.sample::<f64, _>(StandardNormal)).collect();
                let tr = m.schedule().transition(s, t)?;
                let x_t: Vec<f64> = x_s
                    .iter()
                    .map(|&v| tr.alpha_t_given_s * v + tr.sigma_t_given_s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lhs = m.log_density(DensityQuery::ForwardCond { x_t: &x_t, t, x_s: &x_s, s }, None)?
                    + m.log_density(DensityQuery::Marginal { x: &x_s, t: s }, None)?;
                let rhs = m.log_density(DensityQuery::ReverseExact { x_s: &x_s, s, x_t: &x_t, t }, None)?
                    + m.log_density(DensityQuery::Marginal { x: &x_t, t }, None)?;
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
            }
            Ok(vec![StatReport::below("bayes_identity", spec.samples, worst, BAYES_TOL)])
        }
        ConsistencyKind::Marginal => {
            if d != 1 {
                return Err(Error::Invalid("marginal KS check is one-dimensional".into()));
            }
            let mut out = Vec::new();
            for &t in &spec.times {
                let (alpha, sigma) = m.schedule().alpha_sigma(t)?;
                let mut r = chain_rng(spec.seed, (t * 1e6) as u64 + 1);
                let xs: Vec<f64> = (0..spec.samples)
                    .map(|_| {
                        let y = m.set().point(r.gen_range(0..n_pts))[0];
                        crate::samplers::forward_sample(m, &[y], 0.0, t, &mut r).map(|v| v[0])
                    })
                    .collect::<Result<_>>()?;
                let cdf = |x: f64| {
                    (0..n_pts).map(|i| normal_cdf((x - alpha * m.set().point(i)[0]) / sigma)).sum::<f64>() / n_pts as f64
                };
                out.push(StatReport::below(
                    format!("marginal_ks_t{t}"),
                    spec.samples,
                    ks_statistic(&xs, cdf),
                    ks_critical(spec.samples, 0.01),
                ));
            }
            Ok(out)
        }
        ConsistencyKind::ReverseFromOne => {
            let mut worst = 0.0f64;
            let mut count = 0;
            for &x1 in &spec.probes {
                let x1v = vec![x1; d];
                for &s in &spec.times {
                    for &g in &spec.grid {
                        let xs = vec![g; d];
                        let a = m.log_density(DensityQuery::ReverseExact { x_s: &xs, s, x_t: &x1v, t: 1.0 }, None)?;
                        let b = m.log_density(DensityQuery::Marginal { x: &xs, t: s }, None)?;
                        worst = worst.max((a - b).abs());
                        count += 1;
                    }
                }
            }
            Ok(vec![StatReport::below("reverse_from_one", count, worst, REVERSE_FROM_ONE_TOL)])
        }
        ConsistencyKind::TerminalGaussian => {
            let mut sups = Vec::new();
            for &t in &spec.times {
                let mut sup = 0.0f64;
                for &g in &spec.grid {
                    let x = vec![g; d];
                    let p = m.log_density(DensityQuery::Marginal { x: &x, t }, None)?.exp();
                    let phi = (-0.5 * d as f64 * g * g - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()).exp();
                    sup = sup.max((p - phi).abs());
                }
                sups.push((t, sup));
            }
            let mut out: Vec<StatReport> = sups
                .iter()
                .map(|&(t, sup)| StatReport {
                    check: format!("terminal_gaussian_sup_t{t}"),
                    sample_size: spec.grid.len(),
                    statistic: sup,
                    threshold: f64::NAN,
                    pass: true,
                    note: None,
                })
                .collect();
            let decreasing = sups.windows(2).all(|w| w[1].1 < w[0].1);
            let last = sups.last().map_or(f64::NAN, |v| v.1);
            let first = sups.first().map_or(f64::NAN, |v| v.1);
            out.push(StatReport {
                check: "terminal_gaussian_decreasing".into(),
                sample_size: sups.len(),
                statistic: last,
                threshold: first,
                pass: decreasing,
                note: Some("sup-gap must decrease along the increasing time list".into()),
            });
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzRow {
    pub t: f64,
    /// Largest finite-difference directional derivative norm over the grid.
    pub max_fd: f64,
    pub max_analytic: f64,
    pub argmax: Vec<f64>,
    /// `max_fd` relative to the previous (larger) time.
    pub growth: f64,
    /// Largest relative FD-vs-analytic discrepancy over the grid.
    pub fd_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub rows: Vec<LipschitzRow>,
}

/// Score-derivative growth as `t → 0`. The finite-difference step is
/// `h_rel · σ_t²`, the scale on which the score varies.
pub fn lipschitz_probe(m: &MixtureModel, t_list: &[f64], x_grid: &[Vec<f64>], h_rel: f64) -> Result<LipschitzReport> {
    let d = m.dim();
    let mut rows: Vec<LipschitzRow> = Vec::new();
    for &t in t_list {
        let sigma = m.schedule().sigma(t)?;
        let h = h_rel * sigma * sigma;
        let per_point: Vec<(f64, f64, f64, Vec<f64>)> = x_grid
            .par_iter()
            .map(|x| -> Result<_> {
                let jac = m.score_jacobian(x, t, None)?;
                let mut best_fd = 0.0f64;
                let mut best_an = 0.0f64;
                let mut rel = 0.0f64;
                for c in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += h;
                    xm[c] -= h;
                    let sp = m.score_and_eps(&xp, t, None)?.score;
                    let sm = m.score_and_eps(&xm, t, None)?.score;
                    let fd: Vec<f64> = sp.iter().zip(&sm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                    let col: Vec<f64> = (0..d).map(|r| jac[r * d + c]).collect();
                    let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let an_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let diff = fd.iter().zip(&col).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    rel = rel.max(diff / an_norm.max(f64::MIN_POSITIVE));
                    best_fd = best_fd.max(fd_norm);
                    best_an = best_an.max(an_norm);
                }
                Ok((best_fd, best_an, rel, x.clone()))
            })
            .collect::<Result<_>>()?;
        let (mut max_fd, mut max_an, mut rel, mut arg) = (0.0f64, 0.0f64, 0.0f64, Vec::new());
        for (fd, an, r, x) in per_point {
            if fd > max_fd {
                max_fd = fd;
                arg = x;
            }
            max_an = max_an.max(an);
            rel = rel.max(r);
        }
        let growth = rows.last().map_or(f64::NAN, |p| max_fd / p.max_fd);
        rows.push(LipschitzRow { t, max_fd, max_analytic: max_an, argmax: arg, growth, fd_rel_error: rel });
    }
    Ok(LipschitzReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrightnessRow {
    pub init_mode: String,
    pub label: u32,
    pub mean_brightness: f64,
    /// `α_{1-ε}` times the class brightness.
    pub expected_true: f64,
    pub energy_vs_true: f64,
    /// Fraction of fully sampled chains that end on this class's point.
    pub class_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrightnessConfig {
    pub epsilon: f64,
    pub init_modes: Vec<InitMode>,
    /// Ensemble size for the brightness moments.
    pub n: usize,
    /// Leading sub-ensemble used for the energy distance.
    pub n_energy: usize,
    /// Chains sampled to `t = 0` for the hit rates.
    pub n_chains: usize,
    /// Reverse steps of those chains.
    pub steps: usize,
    pub seed: u64,
}

impl Default for BrightnessConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            init_modes: vec![InitMode::NaiveGaussian, InitMode::SingStep, InitMode::TrueForward],
            n: 2_000_000,
            n_energy: 5_000,
            n_chains: 1_000,
            steps: 20,
            seed: 0,
        }
    }
}

pub fn init_mode_name(mode: InitMode) -> &'static str {
    match mode {
        InitMode::NaiveGaussian => "naive_gaussian",
        InitMode::SingStep => "sing_step",
        InitMode::TrueForward => "true_forward",
        InitMode::Direct => "direct",
    }
}

/// Mean brightness of `n` draws of `x_{1-ε}` plus the first `keep` draws.
/// Draws come in 64 fixed chunks with their own streams, so the result does
/// not depend on the thread count.
fn ensemble(m: &MixtureModel, mode: InitMode, label: u32, eps: f64, n: usize, keep: usize, seed: u64) -> Result<(f64, Batch)> {
    let d = m.dim();
    let chunks = 64usize;
    let per = n.div_ceil(chunks);
    let parts: Vec<(f64, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(seed, c as u64);
            let start = c * per;
            let count = per.min(n.saturating_sub(start));
            let mut sum = 0.0;
            let mut kept = Vec::new();
            for i in 0..count {
                let st = initial_step(m, mode, Method::Ddpm, Some(label), None, None, eps, &mut rng)?;
                sum += st.x_one_minus_eps.iter().sum::<f64>();
                if start + i < keep {
                    kept.extend(st.x_one_minus_eps);
                }
            }
            Ok((sum, kept))
        })
        .collect::<Result<_>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let kept: Vec<f64> = parts.into_iter().flat_map(|p| p.1).collect();
    Ok((total / (n * d) as f64, Batch::new(d, kept)?))
}

/// Ensemble of `x_{1-ε}` under `mode` for class `label`.
pub fn init_ensemble(m: &MixtureModel, mode: InitMode, label: u32, epsilon: f64, n: usize, seed: u64) -> Result<Batch> {
    ensemble(m, mode, label, epsilon, n, n, seed).map(|r| r.1)
}

/// Moments and distances of the `1 - ε` ensembles per init mode and class.
///
/// Hit rates come from chains that start from the class-conditional
/// `x_{1-ε}` and then run unconditional DDPM steps, so they show how much
/// of the class information the start carries.
pub fn brightness_experiment(m: &MixtureModel, cfg: &BrightnessConfig) -> Result<Vec<BrightnessRow>> {
    let alpha = m.schedule().alpha(1.0 - cfg.epsilon)?;
    let labels: Vec<u32> = m.set().class_ids().collect();
    let mut rows = Vec::new();
    for &label in &labels {
        let class_brightness = {
            let mean = m.set().mean(Some(label))?;
            mean.iter().sum::<f64>() / mean.len() as f64
        };
        let truth = init_ensemble(m, InitMode::TrueForward, label, cfg.epsilon, cfg.n_energy, cfg.seed ^ 0x5eed)?;
        for (mi, &mode) in cfg.init_modes.iter().enumerate() {
            let seed = cfg.seed.wrapping_add(1000 * (mi as u64 + 1) + label as u64);
            let (mean_brightness, ens) = ensemble(m, mode, label, cfg.epsilon, cfg.n, cfg.n_energy.max(cfg.n_chains), seed)?;
            let sub = Batch::new(ens.dim, ens.data[..cfg.n_energy.min(ens.len()) * ens.dim].to_vec())?;
            let energy_vs_true = energy_distance(&sub, &truth)?;

            let mut sc = SamplerConfig::new(Method::Ddpm, cfg.steps);
            sc.epsilon = Some(cfg.epsilon);
            sc.init_mode = InitMode::TrueForward;
            sc.final_mode = FinalMode::YbarCollapse;
            sc.record = Record::Endpoints;
            sc.seed = seed;
            let own = m.set().select(Some(label))?.to_vec();
            let hits: Vec<bool> = (0..cfg.n_chains)
                .into_par_iter()
                .map(|c| -> Result<bool> {
                    let start = ens.row(c % ens.len());
                    let tr = continue_unconditional(m, &sc, start, c as u64)?;
                    let j = m.nearest_index(tr.as_slice(), 0.0, None)?;
                    Ok(own.contains(&j))
                })
                .collect::<Result<_>>()?;
            rows.push(BrightnessRow {
                init_mode: init_mode_name(mode).into(),
                label,
                mean_brightness,
                expected_true: alpha * class_brightness,
                energy_vs_true,
                class_hit_rate: hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// Unconditional reverse sampling from a given `x_{1-ε}` down to `t = 0`.
fn continue_unconditional(m: &MixtureModel, cfg: &SamplerConfig, start: &[f64], chain: u64) -> Result<Vec<f64>> {
    continue_from(m, cfg, None, start, chain)
}

/// Reverse sampling from a given `x_{1-ε}` down to the end of the grid.
pub fn continue_from(m: &MixtureModel, cfg: &SamplerConfig, label: Option<u32>, start: &[f64], chain: u64) -> Result<Vec<f64>> {
    let grid = cfg.time_grid();
    let mut rng = chain_rng(cfg.seed, chain);
    let mut x = start.to_vec();
    let collapse = cfg.final_mode == FinalMode::YbarCollapse;
    let eps_index = if collapse { grid.len() - 2 } else { grid.len() - 1 };
    for k in 1..eps_index {
        x = crate::samplers::reverse_step(m, cfg.method, &x, grid[k], grid[k + 1], label, None, &mut rng)?;
    }
    if collapse {
        x = m.ybar(&x, grid[eps_index], label)?;
    }
    Ok(x)
}

/// One-dimensional `x_1` at which a deterministic sampler started with the
/// exact one-step initialisation switches between training points,
/// located by bisection on `[lo, hi]`.
pub fn deterministic_separatrix(m: &MixtureModel, cfg: &SamplerConfig, label: Option<u32>, lo: f64, hi: f64, iters: usize) -> Result<f64> {
    if m.dim() != 1 || !cfg.method.is_deterministic() {
        return Err(Error::Invalid("separatrix search needs a 1D set and a deterministic method".into()));
    }
    let (alpha, sigma) = m.schedule().alpha_sigma(1.0 - cfg.epsilon())?;
    let y0 = m.set().mean(label)?[0];
    let class = |x1: f64| -> Result<usize> {
        let end = continue_from(m, cfg, label, &[alpha * y0 + sigma * x1], 0)?;
        m.nearest_index(&end, 0.0, label)
    };
    let (mut a, mut b) = (lo, hi);
    let ca = class(a)?;
    if class(b)? == ca {
        return Err(Error::Invalid(format!("no class switch between x_1 = {lo} and {hi}")));
    }
    for _ in 0..iters {
        let mid = 0.5 * (a + b);
        if class(mid)? == ca {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Runs chains and returns their terminal states in chain order.
pub fn terminal_states(m: &MixtureModel, cfg: &SamplerConfig, label: Option<u32>, init: Option<&InitModel<f64>>) -> Result<Vec<Vec<f64>>> {
    let mut c = cfg.clone();
    c.record = Record::Endpoints;
    (0..c.chains as u64)
        .into_par_iter()
        .map(|k| run_chain(m, &c, label, init, k).map(|tr| tr.terminal().to_vec()))
        .collect()
}
