//! Closed-form diffusion sampling on finite training sets.
//!
//! When the data distribution is the empirical measure of `N` points, the
//! marginals of the forward process are Gaussian mixtures and every reverse
//! conditional, score and denoiser target is available in closed form.
//! This crate evaluates those quantities, runs the standard reverse
//! samplers with explicit handling of both singular endpoints (`t = 1`,
//! where `α = 0`, and `t = 0`, where `σ = 0`) and provides numerical checks
//! of the resulting error bounds and sampling identities.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to `f64`, which is what the verification harness uses.

pub mod error;
pub mod guidance;
pub mod init_trainer;
pub mod mixture;
pub mod samplers;
pub mod scalar;
pub mod schedule;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use guidance::{guided_combine, GuidanceConfig, NegativeLabel};
pub use init_trainer::{fit_init_model, InitModel, LrDecay, TrainConfig};
pub use mixture::{lemma_constants, DensityKind, DensityQuery, LemmaConstants};
pub use samplers::{FinalMode, InitMode, Method, Record};
pub use scalar::Scalar;
pub use schedule::{ScheduleKind, Transition};

pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type TrainingSet = mixture::TrainingSet<f64>;
pub type MixtureModel = mixture::MixtureModel<f64>;
pub type SamplerConfig = samplers::SamplerConfig<f64>;
pub type Trajectory = samplers::Trajectory<f64>;
