use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Additive smoothing in the Dice ratio.
    pub dice_smooth: f64,
    /// Label excluded from the loss and the metrics.
    pub ignore_index: Option<u32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 1.0,
            dice_weight: 1.0,
            dice_smooth: 1.0,
            ignore_index: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.ce_weight) || !ok(self.dice_weight) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got ce {} dice {}",
                self.ce_weight, self.dice_weight
            )));
        }
        if self.ce_weight == 0.0 && self.dice_weight == 0.0 {
            return Err(Error::config("cross-entropy and Dice weights are both zero"));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(Error::config(format!("dice_smooth must be non-negative, got {}", self.dice_smooth)));
        }
        Ok(())
    }
}

/// Combined loss and its parts as plain numbers for logging.
pub struct LossValue<T> {
    pub total: Var<T>,
    pub ce: f64,
    pub dice: f64,
}

/// `ce_weight * CE + dice_weight * Dice`.
pub fn segmentation_loss<T: Element>(
    t: &mut Tape<T>,
    logits: &Var<T>,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<LossValue<T>> {
    let ce = ops::cross_entropy(t, logits, labels, cfg.ignore_index)?;
    let dice = ops::dice(t, logits, labels, cfg.ignore_index, cfg.dice_smooth)?;
    let (ce_v, dice_v) = (ce.value().item().as_f64(), dice.value().item().as_f64());
    let a = ops::scale(t, &ce, T::of(cfg.ce_weight));
    let b = ops::scale(t, &dice, T::of(cfg.dice_weight));
    Ok(LossValue {
        total: ops::add(t, &a, &b)?,
        ce: ce_v,
        dice: dice_v,
    })
}
