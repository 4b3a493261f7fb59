//! Fitting the `t = 1` clean-data predictor.
//!
//! The training objective is `E ||ŷ(x_1, c) - x_0||²` with `x_0` drawn from
//! class `c` and `x_1 ~ N(0, I)` drawn independently. Because `x_1` carries
//! no information about `x_0`, the minimizer is the class mean, so the
//! predictor is a constant vector per class fitted by plain SGD.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::mixture::TrainingSet;
use crate::scalar::Scalar;

/// Consecutive increases of the full loss that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    /// `lr_k = lr / (1 + 2 lr k)`; the iterate becomes a running average of
    /// the minibatch means, so the error keeps shrinking with `k`.
    InverseTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub decay: LrDecay,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(learning_rate: T, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self { learning_rate, steps, batch_size, seed, decay: LrDecay::InverseTime }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || self.batch_size == 0 {
            return Err(Error::Invalid("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class constant predictors, plus the unconditional one under `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitModel<T> {
    means: BTreeMap<Option<u32>, Vec<T>>,
    pub steps_run: usize,
    /// Exact objective of the unconditional predictor after training.
    pub final_loss: T,
    /// Minibatch loss of the unconditional predictor at every step.
    pub loss_history: Vec<T>,
}

impl<T: Scalar> InitModel<T> {
    pub fn dim(&self) -> usize {
        self.means.values().next().map_or(0, Vec::len)
    }

    /// The fitted `ȳ` at `t = 1` for `label` (`None` = unconditional).
    pub fn predict(&self, label: Option<u32>) -> Result<Vec<T>> {
        self.means.get(&label).cloned().ok_or(match label {
            Some(c) => Error::UnknownLabel(c),
            None => Error::Invalid("model has no unconditional predictor".into()),
        })
    }

    /// JSON object mapping class id (or `"unconditional"`) to coordinates.
    pub fn to_json(&self) -> Value {
        let mut classes = Map::new();
        for (k, v) in &self.means {
            let key = k.map_or_else(|| "unconditional".to_string(), |c| c.to_string());
            classes.insert(key, json!(v.iter().map(|x| x.to_f64()).collect::<Vec<_>>()));
        }
        json!({
            "classes": classes,
            "steps_run": self.steps_run,
            "final_loss": self.final_loss.to_f64(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("init model json: {m}"));
        let classes = v.get("classes").and_then(Value::as_object).ok_or_else(|| bad("missing `classes`"))?;
        let mut means = BTreeMap::new();
        for (k, coords) in classes {
            let key = if k == "unconditional" {
                None
            } else {
                Some(k.parse::<u32>().map_err(|_| bad("class keys must be integers"))?)
            };
            let arr = coords
                .as_array()
                .ok_or_else(|| bad("class value must be an array"))?
                .iter()
                .map(|x| x.as_f64().map(T::from_f64))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("coordinates must be numbers"))?;
            means.insert(key, arr);
        }
        if means.is_empty() {
            return Err(bad("no classes"));
        }
        Ok(Self {
            means,
            steps_run: v.get("steps_run").and_then(Value::as_u64).unwrap_or(0) as usize,
            final_loss: T::from_f64(v.get("final_loss").and_then(Value::as_f64).unwrap_or(f64::NAN)),
            loss_history: Vec::new(),
        })
    }
}

/// `E ||μ - x_0||²` over the selected points, in closed form.
fn exact_loss<T: Scalar>(set: &TrainingSet<T>, idx: &[usize], mu: &[T]) -> T {
    let n = T::from_f64(idx.len() as f64);
    idx.iter()
        .map(|&i| set.point(i).iter().zip(mu).map(|(&y, &m)| (m - y) * (m - y)).sum::<T>())
        .sum::<T>()
        / n
}

struct ClassFit<T> {
    mu: Vec<T>,
    history: Vec<T>,
}

fn fit_class<T: Scalar>(set: &TrainingSet<T>, idx: &[usize], cfg: &TrainConfig<T>, stream: u64) -> Result<ClassFit<T>> {
    let d = set.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut mu = vec![T::zero(); d];
    let mut history = Vec::with_capacity(cfg.steps);
    let mut prev_loss = exact_loss(set, idx, &mu);
    let mut rising = 0usize;
    let b = T::from_f64(cfg.batch_size as f64);
    let mut grad = vec![T::zero(); d];
    for k in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut batch_loss = T::zero();
        for _ in 0..cfg.batch_size {
            let x0 = set.point(idx[rng.gen_range(0..idx.len())]);
            // x_1 is part of the objective's sampling but the constant
            // predictor does not read it
            for _ in 0..d {
                let _: f64 = rng.sample(StandardNormal);
            }
            for ((g, &m), &y) in grad.iter_mut().zip(&mu).zip(x0) {
                *g += T::two() * (m - y);
                batch_loss += (m - y) * (m - y);
            }
        }
        history.push(batch_loss / b);
        let lr = match cfg.decay {
            LrDecay::Constant => cfg.learning_rate,
            LrDecay::InverseTime => {
                cfg.learning_rate / (T::one() + T::two() * cfg.learning_rate * T::from_f64(k as f64))
            }
        };
        for (m, &g) in mu.iter_mut().zip(&grad) {
            *m -= lr * g / b;
        }
        let loss = exact_loss(set, idx, &mu);
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected { steps: k + 1, window: DIVERGENCE_WINDOW });
        }
        rising = if loss > prev_loss { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::DivergenceDetected { steps: k + 1, window: DIVERGENCE_WINDOW });
        }
        prev_loss = loss;
    }
    Ok(ClassFit { mu, history })
}

/// Fits one constant predictor per class and one for the whole set.
pub fn fit_init_model<T: Scalar>(set: &TrainingSet<T>, cfg: &TrainConfig<T>) -> Result<InitModel<T>> {
    cfg.validate()?;
    let mut means = BTreeMap::new();
    let uncond = fit_class(set, set.select(None)?, cfg, 0)?;
    let final_loss = exact_loss(set, set.select(None)?, &uncond.mu);
    means.insert(None, uncond.mu);
    for (stream, c) in set.class_ids().enumerate() {
        let fit = fit_class(set, set.select(Some(c))?, cfg, stream as u64 + 1)?;
        means.insert(Some(c), fit.mu);
    }
    Ok(InitModel { means, steps_run: cfg.steps, final_loss, loss_history: uncond.history })
}

/// The fitted `ȳ(x_1, 1, label)`.
pub fn predict_init<T: Scalar>(model: &InitModel<T>, label: Option<u32>) -> Result<Vec<T>> {
    model.predict(label)
}
