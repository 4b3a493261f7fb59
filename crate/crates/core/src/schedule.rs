//! Noise schedules `α(t)`, `σ(t) = sqrt(1 - α(t)^2)` on `[0, 1]` and the
//! coefficients derived from them.
//!
//! Every kind satisfies `α(0) = 1` and `α(1) = 0`. The terminal point is
//! singular for anything that divides by `α`: the drift `f(t) = α'(t)/α(t)`
//! of the forward Ornstein-Uhlenbeck process diverges there, and asking for
//! it returns [`Error::DivergentCoefficient`] instead of an infinity.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of `α(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind<T> {
    /// `α(t) = cos(π/2 · (t+o)/(1+o)) / cos(π/2 · o/(1+o))` with offset `o ≥ 0`.
    Cosine { offset: T },
    /// `α(t)^2 = 1 - t`.
    LinearAlphaSquared,
    /// Piecewise-linear `α` through explicit knots.
    Tabular { times: Vec<T>, alphas: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    kind: ScheduleKind<T>,
}

/// Pointwise schedule values at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEval<T> {
    pub alpha: T,
    pub sigma: T,
    pub alpha_prime: T,
    /// `f(t) = d log α / dt`.
    pub drift_f: T,
    /// `g(t)^2 = -2 f(t)`.
    pub diffusion_g_sq: T,
}

/// Coefficients linking two times `s < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<T> {
    pub alpha_s: T,
    pub sigma_s: T,
    pub alpha_t: T,
    pub sigma_t: T,
    /// `α_{t|s} = α_t / α_s`.
    pub alpha_t_given_s: T,
    /// `σ_{t|s} = sqrt(1 - α_{t|s}^2)`.
    pub sigma_t_given_s: T,
    /// `σ_{s|t} = σ_{t|s} σ_s / σ_t`, the stdev of the reverse kernel.
    pub sigma_s_given_t: T,
    /// `1 - α_{t|s}^2`; the discrete `β̂_i` for `s = (i-1)/T`, `t = i/T`.
    pub beta_hat: T,
}

impl<T: Scalar> Transition<T> {
    /// Coefficient of `x_t` in the mean of the Gaussian reverse kernel.
    #[inline]
    pub fn mean_coef_x(&self) -> T {
        self.alpha_t_given_s * self.sigma_s * self.sigma_s / (self.sigma_t * self.sigma_t)
    }

    /// Coefficient of the clean-data estimate in the reverse kernel mean.
    #[inline]
    pub fn mean_coef_y(&self) -> T {
        self.alpha_s * self.beta_hat / (self.sigma_t * self.sigma_t)
    }
}

fn check_time<T: Scalar>(t: T) -> Result<()> {
    if t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::domain(format!("time {t} outside [0, 1]")))
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    /// `α(t) = cos(πt/2)`.
    pub fn cosine() -> Self {
        Self { kind: ScheduleKind::Cosine { offset: T::zero() } }
    }

    pub fn cosine_with_offset(offset: T) -> Result<Self> {
        if !(offset >= T::zero()) || !offset.is_finite() {
            return Err(Error::Invalid(format!("cosine offset must be finite and >= 0, got {offset}")));
        }
        Ok(Self { kind: ScheduleKind::Cosine { offset } })
    }

    pub fn linear_alpha_squared() -> Self {
        Self { kind: ScheduleKind::LinearAlphaSquared }
    }

    /// Piecewise-linear `α` through `(times[k], alphas[k])`.
    ///
    /// Knot times must start at 0, end at 1 and increase strictly; the
    /// alphas must start at 1, end at 0 and decrease strictly.
    pub fn tabular(times: Vec<T>, alphas: Vec<T>) -> Result<Self> {
        if times.len() != alphas.len() || times.len() < 2 {
            return Err(Error::Invalid("tabular schedule needs >= 2 knots with matching lengths".into()));
        }
        if times[0] != T::zero() || *times.last().unwrap() != T::one() {
            return Err(Error::Invalid("tabular knot times must run from 0 to 1".into()));
        }
        if alphas[0] != T::one() || *alphas.last().unwrap() != T::zero() {
            return Err(Error::Invalid("tabular alphas must run from 1 to 0".into()));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Invalid("tabular knot times must increase strictly".into()));
            }
        }
        for w in alphas.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Invalid("tabular alphas must decrease strictly".into()));
            }
        }
        Ok(Self { kind: ScheduleKind::Tabular { times, alphas } })
    }

    pub fn kind(&self) -> &ScheduleKind<T> {
        &self.kind
    }

    /// Index of the tabular segment containing `t`; the last segment is closed.
    fn segment(times: &[T], t: T) -> usize {
        let n = times.len();
        match times.iter().position(|&k| k > t) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        }
    }

    fn alpha_unchecked(&self, t: T) -> T {
        match &self.kind {
            ScheduleKind::Cosine { offset } => {
                if t == T::one() {
                    return T::zero();
                }
                let h = T::FRAC_PI_2();
                if offset.is_zero() {
                    (h * t).cos()
                } else {
                    let o = *offset;
                    (h * (t + o) / (T::one() + o)).cos() / (h * o / (T::one() + o)).cos()
                }
            }
            ScheduleKind::LinearAlphaSquared => (T::one() - t).sqrt(),
            ScheduleKind::Tabular { times, alphas } => {
                let i = Self::segment(times, t);
                let w = (t - times[i]) / (times[i + 1] - times[i]);
                alphas[i] + w * (alphas[i + 1] - alphas[i])
            }
        }
    }

    fn sigma_unchecked(&self, t: T, alpha: T) -> T {
        match &self.kind {
            ScheduleKind::Cosine { offset } if offset.is_zero() => {
                if t == T::one() {
                    T::one()
                } else {
                    (T::FRAC_PI_2() * t).sin()
                }
            }
            ScheduleKind::LinearAlphaSquared => t.sqrt(),
            _ => ((T::one() - alpha) * (T::one() + alpha)).sqrt(),
        }
    }

    fn alpha_prime_unchecked(&self, t: T) -> Result<T> {
        match &self.kind {
            ScheduleKind::Cosine { offset } => {
                let h = T::FRAC_PI_2();
                let o = *offset;
                let scale = h / (T::one() + o);
                let norm = (h * o / (T::one() + o)).cos();
                Ok(-scale * (h * (t + o) / (T::one() + o)).sin() / norm)
            }
            ScheduleKind::LinearAlphaSquared => {
                if t == T::one() {
                    Err(Error::DivergentCoefficient { t: t.to_f64() })
                } else {
                    Ok(-T::half() / (T::one() - t).sqrt())
                }
            }
            ScheduleKind::Tabular { times, alphas } => {
                let i = Self::segment(times, t);
                Ok((alphas[i + 1] - alphas[i]) / (times[i + 1] - times[i]))
            }
        }
    }

    pub fn alpha(&self, t: T) -> Result<T> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub fn sigma(&self, t: T) -> Result<T> {
        check_time(t)?;
        Ok(self.sigma_unchecked(t, self.alpha_unchecked(t)))
    }

    /// `(α(t), σ(t))`.
    pub fn alpha_sigma(&self, t: T) -> Result<(T, T)> {
        check_time(t)?;
        let a = self.alpha_unchecked(t);
        Ok((a, self.sigma_unchecked(t, a)))
    }

    /// `α'(t)`. Finite at `t = 1` for the cosine and tabular kinds.
    pub fn alpha_prime(&self, t: T) -> Result<T> {
        check_time(t)?;
        self.alpha_prime_unchecked(t)
    }

    /// Full evaluation including the SDE drift and diffusion.
    ///
    /// Fails with [`Error::DivergentCoefficient`] where `α(t) = 0`.
    pub fn eval(&self, t: T) -> Result<ScheduleEval<T>> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if alpha <= T::zero() {
            return Err(Error::DivergentCoefficient { t: t.to_f64() });
        }
        let alpha_prime = self.alpha_prime_unchecked(t)?;
        let drift_f = alpha_prime / alpha;
        Ok(ScheduleEval {
            alpha,
            sigma,
            alpha_prime,
            drift_f,
            diffusion_g_sq: -T::two() * drift_f,
        })
    }

    /// Coefficients for the pair `s < t`.
    pub fn transition(&self, s: T, t: T) -> Result<Transition<T>> {
        check_time(s)?;
        check_time(t)?;
        if !(s < t) {
            return Err(Error::domain(format!("transition requires s < t, got s = {s}, t = {t}")));
        }
        let (alpha_s, sigma_s) = self.alpha_sigma(s)?;
        let (alpha_t, sigma_t) = self.alpha_sigma(t)?;
        if alpha_s <= T::zero() {
            return Err(Error::domain(format!("alpha(s) = 0 at s = {s}")));
        }
        let alpha_t_given_s = alpha_t / alpha_s;
        // (α_s² - α_t²)/α_s² keeps precision as t → s⁺
        let beta_hat = ((alpha_s - alpha_t) * (alpha_s + alpha_t) / (alpha_s * alpha_s)).max(T::zero());
        let sigma_t_given_s = beta_hat.sqrt();
        let sigma_s_given_t = sigma_t_given_s * sigma_s / sigma_t;
        Ok(Transition {
            alpha_s,
            sigma_s,
            alpha_t,
            sigma_t,
            alpha_t_given_s,
            sigma_t_given_s,
            sigma_s_given_t,
            beta_hat,
        })
    }
}

impl<T: Scalar> Default for NoiseSchedule<T> {
    fn default() -> Self {
        Self::cosine()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kinds() -> Vec<NoiseSchedule<f64>> {
        vec![
            NoiseSchedule::cosine(),
            NoiseSchedule::cosine_with_offset(0.008).unwrap(),
            NoiseSchedule::linear_alpha_squared(),
            NoiseSchedule::tabular(vec![0.0, 0.3, 0.7, 1.0], vec![1.0, 0.9, 0.4, 0.0]).unwrap(),
        ]
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = NoiseSchedule::<f64>::cosine();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.alpha_sigma(1.0).unwrap(), (0.0, 1.0));
        let (a, sg) = s.alpha_sigma(0.5).unwrap();
        assert_abs_diff_eq!(a, 0.70710678, epsilon = 1e-8);
        assert_abs_diff_eq!(sg, 0.70710678, epsilon = 1e-8);
    }

    #[test]
    fn drift_at_terminal_time_is_divergent() {
        for s in kinds() {
            assert!(matches!(s.eval(1.0), Err(Error::DivergentCoefficient { .. })));
        }
        // α'(1) itself is finite for cosine
        let c = NoiseSchedule::<f64>::cosine();
        assert_abs_diff_eq!(c.alpha_prime(1.0).unwrap(), -std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let s = NoiseSchedule::<f64>::cosine();
        assert!(matches!(s.alpha(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.eval(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.alpha(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn tabular_transition_values() {
        // α_s = 0.9 at s = 0.3, α_t = 0.8 at t = 0.5
        let s = NoiseSchedule::<f64>::tabular(vec![0.0, 0.3, 0.5, 1.0], vec![1.0, 0.9, 0.8, 0.0]).unwrap();
        let tr = s.transition(0.3, 0.5).unwrap();
        // mpmath reference values
        assert_abs_diff_eq!(tr.alpha_t_given_s, 0.888_888_888_888_888_9, epsilon = 1e-14);
        assert_abs_diff_eq!(tr.sigma_t_given_s, 0.458_122_847_290_851_2, epsilon = 1e-14);
        assert_abs_diff_eq!(tr.sigma_s_given_t, 0.332_818_532_511_322_7, epsilon = 1e-14);
        assert_abs_diff_eq!(tr.beta_hat, 1.0 - tr.alpha_t_given_s.powi(2), epsilon = 1e-15);
    }

    #[test]
    fn transition_domain_errors() {
        let s = NoiseSchedule::<f64>::cosine();
        assert!(s.transition(0.5, 0.5).is_err());
        assert!(s.transition(0.6, 0.5).is_err());
        assert!(s.transition(1.0, 1.0).is_err());
        assert!(s.transition(0.0, 1.0).is_ok());
    }

    #[test]
    fn reverse_stdev_vanishes_as_t_approaches_s() {
        let s = NoiseSchedule::<f64>::cosine();
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let t = 0.4 + 10f64.powi(-k);
            let v = s.transition(0.4, t).unwrap().sigma_s_given_t;
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn sigma_s_given_t_non_decreasing_and_bounded() {
        for sched in kinds() {
            for &s in &[0.0, 0.1, 0.5, 0.85] {
                let sigma_s = sched.sigma(s).unwrap();
                let mut prev = 0.0;
                for k in 1..=200 {
                    let t = s + (1.0 - s) * k as f64 / 200.0;
                    let v = sched.transition(s, t).unwrap().sigma_s_given_t;
                    assert!(v + 1e-15 >= prev, "s={s} t={t}");
                    assert!(v <= sigma_s + 1e-15);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn cosine_derivative_matches_central_difference() {
        let s = NoiseSchedule::<f64>::cosine();
        for &t in &[0.1, 0.33, 0.5, 0.8, 0.95] {
            let a = s.alpha_prime(t).unwrap();
            let e1 = (a - (s.alpha(t + 1e-3).unwrap() - s.alpha(t - 1e-3).unwrap()) / 2e-3).abs();
            let e2 = (a - (s.alpha(t + 5e-4).unwrap() - s.alpha(t - 5e-4).unwrap()) / 1e-3).abs();
            // halving h divides the error by ~4
            assert!(e1 < 1e-6);
            assert!((e1 / e2 - 4.0).abs() < 0.1, "ratio {}", e1 / e2);
        }
    }

    #[test]
    fn beta_hat_matches_integrated_drift() {
        for sched in kinds().into_iter().filter(|k| !matches!(k.kind(), ScheduleKind::Tabular { .. })) {
            for &(s, t) in &[(0.1, 0.2), (0.3, 0.6), (0.5, 0.9)] {
                let n = 2000;
                let h = (t - s) / n as f64;
                let mut integral = 0.0;
                for i in 0..=n {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    integral += w * sched.eval(s + i as f64 * h).unwrap().drift_f;
                }
                integral *= h / 3.0;
                let beta = sched.transition(s, t).unwrap().beta_hat;
                assert_abs_diff_eq!(1.0 - (2.0 * integral).exp(), beta, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn drift_and_diffusion_relation() {
        let s = NoiseSchedule::<f64>::cosine();
        let e = s.eval(0.3).unwrap();
        assert_abs_diff_eq!(e.diffusion_g_sq, -2.0 * e.drift_f, epsilon = 1e-15);
        assert_abs_diff_eq!(e.drift_f, e.alpha_prime / e.alpha, epsilon = 1e-15);
    }

    #[test]
    fn tabular_validation() {
        assert!(NoiseSchedule::<f64>::tabular(vec![0.0, 1.0], vec![1.0, 0.0]).is_ok());
        assert!(NoiseSchedule::<f64>::tabular(vec![0.0, 0.5, 1.0], vec![1.0, 1.0, 0.0]).is_err());
        assert!(NoiseSchedule::<f64>::tabular(vec![0.0, 1.0], vec![0.9, 0.0]).is_err());
        assert!(NoiseSchedule::<f64>::tabular(vec![0.1, 1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn f32_schedule_is_usable() {
        let s = NoiseSchedule::<f32>::cosine();
        let (a, sg) = s.alpha_sigma(0.25).unwrap();
        assert!((a * a + sg * sg - 1.0).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn unit_norm(t in 0.0f64..=1.0) {
            for s in kinds() {
                let (a, sg) = s.alpha_sigma(t).unwrap();
                proptest::prop_assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn alpha_monotone(t1 in 0.0f64..1.0, dt in 1e-9f64..0.5) {
            let t2 = (t1 + dt).min(1.0);
            for s in kinds() {
                proptest::prop_assert!(s.alpha(t2).unwrap() < s.alpha(t1).unwrap());
            }
        }
    }
}
