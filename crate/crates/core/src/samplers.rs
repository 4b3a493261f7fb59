//! Forward noising and reverse samplers.
//!
//! All reverse methods read the exact `ȳ(x, t)` of a [`MixtureModel`] (or
//! its guided combination), so differences between runs come only from the
//! discretization and the handling of the two singular endpoints:
//!
//! * `t = 1`: `α = 0`. ε-parameterized steps divide by `α_t` and the SDE
//!   drift is infinite, so those methods refuse to step from `t = 1`. The
//!   initial step is instead taken by an [`InitMode`]; `SingStep` is the
//!   one-step DDIM update `x_{1-ε} = α_{1-ε} ȳ(x_1, 1) + σ_{1-ε} x_1`.
//! * `t = 0`: `σ = 0` and the reverse kernel is a Dirac mass on the nearest
//!   training point; the last transition returns `ȳ(x_ε, ε)`.
//!
//! Each chain draws from its own ChaCha stream keyed by `(seed, chain)`, so
//! results do not depend on how chains are scheduled across threads.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::{guided_combine, GuidanceConfig};
use crate::init_trainer::InitModel;
use crate::mixture::MixtureModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Gaussian reverse kernel with `ȳ` (x-prediction).
    Ddpm,
    /// The same kernel written through `ε`, dividing by `α_t`.
    DdpmEps,
    Ddim,
    /// Euler-Maruyama on the reverse SDE.
    SdeEm,
    OdeEuler,
    OdeRk4,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::DdpmEps => "ddpm_eps",
            Method::Ddim => "ddim",
            Method::SdeEm => "sde_em",
            Method::OdeEuler => "ode_euler",
            Method::OdeRk4 => "ode_rk4",
        }
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::Ddim | Method::OdeEuler | Method::OdeRk4)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the state at `1 - ε` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `x_{1-ε} ~ N(0, I)`, ignoring the `t = 1` step.
    NaiveGaussian,
    /// One DDIM step from `x_1 ~ N(0, I)` with the `t = 1` clean-data estimate.
    SingStep,
    /// Forward-noise a uniformly drawn training point to `1 - ε`.
    TrueForward,
    /// Let the configured method take the `1 → 1-ε` step itself.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalMode {
    /// Last transition `ε → 0` returns `ȳ(x_ε, ε)`.
    YbarCollapse,
    /// Stop at `t = ε`.
    PlainLastStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Full,
    /// Keep only the first, the `1 - ε` and the last state.
    Endpoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig<T> {
    pub method: Method,
    pub steps: usize,
    /// Time margin; `None` means `1/steps`.
    pub epsilon: Option<T>,
    pub init_mode: InitMode,
    pub final_mode: FinalMode,
    pub guidance: Option<GuidanceConfig<T>>,
    pub seed: u64,
    pub chains: usize,
    pub record: Record,
}

impl<T: Scalar> SamplerConfig<T> {
    pub fn new(method: Method, steps: usize) -> Self {
        Self {
            method,
            steps,
            epsilon: None,
            init_mode: InitMode::SingStep,
            final_mode: FinalMode::YbarCollapse,
            guidance: None,
            seed: 0,
            chains: 1,
            record: Record::Full,
        }
    }

    pub fn epsilon(&self) -> T {
        self.epsilon.unwrap_or_else(|| T::one() / T::from_f64(self.steps as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Invalid(format!("need at least 2 steps, got {}", self.steps)));
        }
        let eps = self.epsilon();
        if !(eps > T::zero() && eps < T::half()) {
            return Err(Error::Invalid(format!("epsilon must lie in (0, 0.5), got {eps}")));
        }
        if self.chains == 0 {
            return Err(Error::Invalid("need at least one chain".into()));
        }
        if let Some(g) = &self.guidance {
            if !(g.scale >= T::one()) {
                return Err(Error::domain(format!("guidance scale must be >= 1, got {}", g.scale)));
            }
        }
        Ok(())
    }

    /// `[1, 1-ε, …, ε]` followed by `0` under [`FinalMode::YbarCollapse`].
    ///
    /// The interior from `1-ε` down to `ε` is uniform with `steps - 2`
    /// intervals, i.e. exactly `i/steps` when `ε = 1/steps`.
    pub fn time_grid(&self) -> Vec<T> {
        let eps = self.epsilon();
        let hi = T::one() - eps;
        let n = self.steps.max(3) - 1;
        let last = T::from_f64((n - 1) as f64);
        let mut grid = Vec::with_capacity(n + 2);
        grid.push(T::one());
        for k in 0..n {
            let kk = T::from_f64(k as f64);
            grid.push((hi * (last - kk) + eps * kk) / last);
        }
        if self.final_mode == FinalMode::YbarCollapse {
            grid.push(T::zero());
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// Strictly decreasing.
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    /// Noise drawn at `t = 1`, absent for [`InitMode::TrueForward`].
    pub x1: Option<Vec<T>>,
    pub label: Option<u32>,
    pub seed: u64,
    pub chain: u64,
}

impl<T> Trajectory<T> {
    pub fn terminal(&self) -> &[T] {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Per-chain random stream.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

fn normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<T> {
    (0..d).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Supplies (possibly guided) `ȳ` and `ε` predictions.
struct Denoiser<'a, T> {
    model: &'a MixtureModel<T>,
    label: Option<u32>,
    guidance: Option<&'a GuidanceConfig<T>>,
}

impl<'a, T: Scalar> Denoiser<'a, T> {
    fn new(model: &'a MixtureModel<T>, label: Option<u32>, guidance: Option<&'a GuidanceConfig<T>>) -> Self {
        let label = guidance.map_or(label, |g| Some(g.pos_label));
        Self { model, label, guidance }
    }

    fn ybar(&self, x: &[T], t: T) -> Result<Vec<T>> {
        match self.guidance {
            None => self.model.ybar(x, t, self.label),
            Some(g) => {
                let pos = self.model.ybar(x, t, Some(g.pos_label))?;
                let neg = self.model.ybar(x, t, g.neg_label.as_label())?;
                guided_combine(&pos, &neg, g.scale, false)
            }
        }
    }

    fn eps(&self, x: &[T], t: T) -> Result<Vec<T>> {
        match self.guidance {
            None => Ok(self.model.score_and_eps(x, t, self.label)?.eps),
            Some(g) => {
                let pos = self.model.score_and_eps(x, t, Some(g.pos_label))?.eps;
                let neg = self.model.score_and_eps(x, t, g.neg_label.as_label())?.eps;
                guided_combine(&pos, &neg, g.scale, false)
            }
        }
    }

    /// Clean-data estimate at `t = 1`, normalized by `w` when configured.
    fn initial_ybar(&self, init: Option<&InitModel<T>>) -> Result<Vec<T>> {
        let predict = |label: Option<u32>| match init {
            Some(m) => m.predict(label),
            None => self.model.set().mean(label),
        };
        match self.guidance {
            None => predict(self.label),
            Some(g) => {
                let pos = predict(Some(g.pos_label))?;
                let neg = predict(g.neg_label.as_label())?;
                guided_combine(&pos, &neg, g.scale, g.normalize_initial)
            }
        }
    }

    /// Probability-flow velocity `α'(ȳ - α x)/σ²`.
    fn ode_rhs(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let sched = self.model.schedule();
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        if sigma <= T::zero() {
            return Err(Error::domain(format!("probability-flow field undefined at t = {t} (sigma = 0)")));
        }
        let ap = sched.alpha_prime(t)?;
        let yb = self.ybar(x, t)?;
        let var = sigma * sigma;
        Ok(x.iter().zip(&yb).map(|(&xi, &y)| ap * (y - alpha * xi) / var).collect())
    }

    fn step<R: Rng + ?Sized>(&self, method: Method, x_t: &[T], t: T, s: T, rng: &mut R) -> Result<Vec<T>> {
        let sched = self.model.schedule();
        match method {
            Method::Ddpm | Method::DdpmEps => {
                let tr = sched.transition(s, t)?;
                let yb = if method == Method::Ddpm {
                    self.ybar(x_t, t)?
                } else {
                    if tr.alpha_t <= T::zero() {
                        return Err(Error::SingularStep { method: method.name().into(), t: t.to_f64() });
                    }
                    let eps = self.eps(x_t, t)?;
                    x_t.iter().zip(&eps).map(|(&x, &e)| (x - tr.sigma_t * e) / tr.alpha_t).collect()
                };
                let (cx, cy) = (tr.mean_coef_x(), tr.mean_coef_y());
                let z: Vec<T> = normal_vec(rng, x_t.len());
                Ok(x_t
                    .iter()
                    .zip(&yb)
                    .zip(&z)
                    .map(|((&x, &y), &n)| cx * x + cy * y + tr.sigma_s_given_t * n)
                    .collect())
            }
            Method::Ddim => {
                let (alpha_s, sigma_s) = sched.alpha_sigma(s)?;
                let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
                if !(s < t) {
                    return Err(Error::domain(format!("reverse step requires s < t, got s = {s}, t = {t}")));
                }
                let yb = self.ybar(x_t, t)?;
                let r = sigma_s / sigma_t;
                let cy = alpha_s - r * alpha_t;
                Ok(x_t.iter().zip(&yb).map(|(&x, &y)| cy * y + r * x).collect())
            }
            Method::SdeEm => {
                if !(s < t) || s < T::zero() {
                    return Err(Error::domain(format!("reverse step requires 0 <= s < t, got s = {s}, t = {t}")));
                }
                let ev = sched.eval(t)?;
                let score = match self.guidance {
                    None => self.model.score_and_eps(x_t, t, self.label)?.score,
                    Some(_) => {
                        let yb = self.ybar(x_t, t)?;
                        let var = ev.sigma * ev.sigma;
                        x_t.iter().zip(&yb).map(|(&x, &y)| (ev.alpha * y - x) / var).collect()
                    }
                };
                let h = t - s;
                let g = ev.diffusion_g_sq.sqrt();
                let z: Vec<T> = normal_vec(rng, x_t.len());
                Ok(x_t
                    .iter()
                    .zip(&score)
                    .zip(&z)
                    .map(|((&x, &sc), &n)| x - (ev.drift_f * x - ev.diffusion_g_sq * sc) * h + g * h.sqrt() * n)
                    .collect())
            }
            Method::OdeEuler | Method::OdeRk4 => {
                if !(s < t) || s < T::zero() {
                    return Err(Error::domain(format!("reverse step requires 0 <= s < t, got s = {s}, t = {t}")));
                }
                let h = t - s;
                let k1 = self.ode_rhs(x_t, t)?;
                if method == Method::OdeEuler {
                    return Ok(x_t.iter().zip(&k1).map(|(&x, &k)| x - h * k).collect());
                }
                let half = h * T::half();
                let shift = |x: &[T], k: &[T], c: T| -> Vec<T> { x.iter().zip(k).map(|(&a, &b)| a - c * b).collect() };
                let k2 = self.ode_rhs(&shift(x_t, &k1, half), t - half)?;
                let k3 = self.ode_rhs(&shift(x_t, &k2, half), t - half)?;
                let k4 = self.ode_rhs(&shift(x_t, &k3, h), s)?;
                let six = T::from_f64(6.0);
                Ok((0..x_t.len())
                    .map(|i| x_t[i] - h / six * (k1[i] + T::two() * k2[i] + T::two() * k3[i] + k4[i]))
                    .collect())
            }
        }
    }
}

/// Draws `x_t = α_{t|s} x_s + σ_{t|s} z`.
pub fn forward_sample<T: Scalar, R: Rng + ?Sized>(m: &MixtureModel<T>, x_s: &[T], s: T, t: T, rng: &mut R) -> Result<Vec<T>> {
    let tr = m.schedule().transition(s, t)?;
    let z: Vec<T> = normal_vec(rng, x_s.len());
    Ok(x_s.iter().zip(&z).map(|(&x, &n)| tr.alpha_t_given_s * x + tr.sigma_t_given_s * n).collect())
}

/// One reverse transition `x_t → x_s` with exact (optionally guided) predictions.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<T: Scalar, R: Rng + ?Sized>(
    m: &MixtureModel<T>,
    method: Method,
    x_t: &[T],
    t: T,
    s: T,
    label: Option<u32>,
    guidance: Option<&GuidanceConfig<T>>,
    rng: &mut R,
) -> Result<Vec<T>> {
    Denoiser::new(m, label, guidance).step(method, x_t, t, s, rng)
}

/// Probability-flow ODE velocity at `(x, t)`.
pub fn ode_rhs<T: Scalar>(m: &MixtureModel<T>, x: &[T], t: T, label: Option<u32>) -> Result<Vec<T>> {
    Denoiser::new(m, label, None).ode_rhs(x, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialState<T> {
    pub x1: Option<Vec<T>>,
    pub x_one_minus_eps: Vec<T>,
}

/// Produces the state at `1 - ε`.
#[allow(clippy::too_many_arguments)]
pub fn initial_step<T: Scalar, R: Rng + ?Sized>(
    m: &MixtureModel<T>,
    mode: InitMode,
    method: Method,
    label: Option<u32>,
    init_model: Option<&InitModel<T>>,
    guidance: Option<&GuidanceConfig<T>>,
    epsilon: T,
    rng: &mut R,
) -> Result<InitialState<T>> {
    let den = Denoiser::new(m, label, guidance);
    let d = m.dim();
    let target = T::one() - epsilon;
    match mode {
        InitMode::NaiveGaussian => {
            let x1 = normal_vec(rng, d);
            let x = normal_vec(rng, d);
            Ok(InitialState { x1: Some(x1), x_one_minus_eps: x })
        }
        InitMode::SingStep => {
            let x1: Vec<T> = normal_vec(rng, d);
            let yb = den.initial_ybar(init_model)?;
            if yb.len() != d {
                return Err(Error::Invalid(format!("initial predictor has dimension {}, data has {d}", yb.len())));
            }
            let (alpha, sigma) = m.schedule().alpha_sigma(target)?;
            let x = yb.iter().zip(&x1).map(|(&y, &z)| alpha * y + sigma * z).collect();
            Ok(InitialState { x1: Some(x1), x_one_minus_eps: x })
        }
        InitMode::TrueForward => {
            let idx = m.set().select(den.label)?;
            let y = m.set().point(idx[rng.gen_range(0..idx.len())]).to_vec();
            let x = forward_sample(m, &y, T::zero(), target, rng)?;
            Ok(InitialState { x1: None, x_one_minus_eps: x })
        }
        InitMode::Direct => {
            let x1: Vec<T> = normal_vec(rng, d);
            let x = den.step(method, &x1, T::one(), target, rng)?;
            Ok(InitialState { x1: Some(x1), x_one_minus_eps: x })
        }
    }
}

/// `x_0 = ȳ(x_t, t)`: the collapse onto the data at the last step.
pub fn final_step<T: Scalar>(m: &MixtureModel<T>, x_t: &[T], t: T, label: Option<u32>) -> Result<Vec<T>> {
    m.ybar(x_t, t, label)
}

/// Runs chain number `chain` of `cfg`.
pub fn run_chain<T: Scalar>(
    m: &MixtureModel<T>,
    cfg: &SamplerConfig<T>,
    label: Option<u32>,
    init_model: Option<&InitModel<T>>,
    chain: u64,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    let mut rng = chain_rng(cfg.seed, chain);
    let guidance = cfg.guidance.as_ref();
    let den = Denoiser::new(m, label, guidance);
    let grid = cfg.time_grid();
    let init = initial_step(m, cfg.init_mode, cfg.method, label, init_model, guidance, cfg.epsilon(), &mut rng)?;

    let mut times = Vec::new();
    let mut states = Vec::new();
    if let Some(x1) = &init.x1 {
        times.push(grid[0]);
        states.push(x1.clone());
    }
    let mut x = init.x_one_minus_eps.clone();
    times.push(grid[1]);
    states.push(x.clone());

    let eps_index = if cfg.final_mode == FinalMode::YbarCollapse { grid.len() - 2 } else { grid.len() - 1 };
    for k in 1..eps_index {
        x = den.step(cfg.method, &x, grid[k], grid[k + 1], &mut rng)?;
        if cfg.record == Record::Full || k + 1 == eps_index {
            times.push(grid[k + 1]);
            states.push(x.clone());
        }
    }
    if cfg.final_mode == FinalMode::YbarCollapse {
        x = den.ybar(&x, grid[eps_index])?;
        times.push(T::zero());
        states.push(x);
    }
    Ok(Trajectory { times, states, x1: init.x1, label: den.label, seed: cfg.seed, chain })
}

/// Runs `cfg.chains` chains in parallel; output order is chain order.
pub fn run_batch<T: Scalar>(
    m: &MixtureModel<T>,
    cfg: &SamplerConfig<T>,
    label: Option<u32>,
    init_model: Option<&InitModel<T>>,
) -> Result<Vec<Trajectory<T>>> {
    cfg.validate()?;
    (0..cfg.chains as u64)
        .into_par_iter()
        .map(|c| run_chain(m, cfg, label, init_model, c))
        .collect()
}
