use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// A drift or diffusion coefficient is infinite at `t` (α(t) = 0).
    #[error("divergent coefficient at t = {t}: f(t) = -inf and g^2(t) = +inf, the reverse SDE step is inf - inf")]
    DivergentCoefficient { t: f64 },

    /// An ε-parameterized step divides by α(t) = 0.
    #[error("singular step: method {method} at t = {t} divides by alpha(t) = 0 (division-by-zero singularity of epsilon-prediction)")]
    SingularStep { method: String, t: f64 },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureUnconverged(String),

    #[error("training diverged after {steps} steps: loss increased for {window} consecutive steps")]
    DivergenceDetected { steps: usize, window: usize },

    #[error("unknown label {0}")]
    UnknownLabel(u32),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
