//! Classifier-free guidance.
//!
//! Interior steps use `o_neg + w (o_pos - o_neg)` on whatever the model
//! predicts. At the `t = 1` initial step the same combination of `ȳ`
//! predictions is divided by `w`, which keeps the initial clean-data
//! estimate on the scale of the data even for large `w`.

use num_traits::Num;

use crate::error::{Error, Result};

/// What the negative branch conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeLabel {
    /// The whole training set.
    Unconditional,
    Class(u32),
}

impl NegativeLabel {
    pub fn as_label(self) -> Option<u32> {
        match self {
            NegativeLabel::Unconditional => None,
            NegativeLabel::Class(c) => Some(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig<T> {
    pub scale: T,
    /// Divide the initial-step combination by `scale`.
    pub normalize_initial: bool,
    pub pos_label: u32,
    pub neg_label: NegativeLabel,
}

impl<T: Num + PartialOrd + Copy + std::fmt::Display> GuidanceConfig<T> {
    pub fn new(scale: T, normalize_initial: bool, pos_label: u32, neg_label: NegativeLabel) -> Result<Self> {
        if !(scale >= T::one()) {
            return Err(Error::domain(format!("guidance scale must be >= 1, got {scale}")));
        }
        Ok(Self { scale, normalize_initial, pos_label, neg_label })
    }
}

/// Guided combination of a positive and a negative prediction.
///
/// Works for any numeric field; with an exact type (e.g. a rational) the
/// identities `w = 1 → o_pos` and `normalized = unnormalized / w` hold
/// exactly. In floating point the `w = 1` case is returned verbatim and the
/// normalized value is the unnormalized one divided by `w`.
pub fn guided_combine<T>(o_pos: &[T], o_neg: &[T], w: T, normalize: bool) -> Result<Vec<T>>
where
    T: Num + PartialOrd + Clone + std::fmt::Debug,
{
    if !(w >= T::one()) {
        return Err(Error::domain(format!("guidance scale must be >= 1, got {w:?}")));
    }
    if o_pos.len() != o_neg.len() {
        return Err(Error::domain(format!(
            "guidance outputs differ in dimension: {} vs {}",
            o_pos.len(),
            o_neg.len()
        )));
    }
    if w.is_one() {
        return Ok(o_pos.to_vec());
    }
    Ok(o_pos
        .iter()
        .zip(o_neg)
        .map(|(p, n)| {
            let u = n.clone() + w.clone() * (p.clone() - n.clone());
            if normalize {
                u / w.clone()
            } else {
                u
            }
        })
        .collect())
}
