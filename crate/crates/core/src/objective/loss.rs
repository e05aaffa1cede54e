//! Cross-entropy, dice and the combined principal/auxiliary loss.
//!
//! Targets are flat label maps laid out as `[B, H, W]` matching the spatial
//! layout of the logits. Pixels equal to the ignore label contribute to
//! neither the sums nor the pixel count N.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the auxiliary cross-entropy in the total loss.
    pub aux_weight: f64,
    pub dice_eps: f64,
    pub ignore_label: Option<u8>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            aux_weight: 0.4,
            dice_eps: 1e-8,
            ignore_label: Some(255),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(TensorError::invalid(
                "loss config",
                "aux_weight must be finite and >= 0",
            ));
        }
        if !(self.dice_eps > 0.0 && self.dice_eps.is_finite()) {
            return Err(TensorError::invalid(
                "loss config",
                "dice_eps must be finite and > 0",
            ));
        }
        Ok(())
    }
}

/// Loss decomposition as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub dice: f64,
    pub principal: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `principal` and `total` follow from the parts.
    pub fn from_parts(ce: f64, dice: f64, aux: f64, aux_weight: f64) -> Self {
        let principal = ce + dice;
        LossReport {
            ce,
            dice,
            principal,
            aux,
            total: principal + aux_weight * aux,
        }
    }
}

/// One-hot encoding `[B, K, H, W]` of `target`, all-zero at ignored pixels,
/// together with the count of contributing pixels.
pub fn one_hot<T: Scalar>(
    shape: &[usize],
    target: &[u8],
    ignore: Option<u8>,
) -> Result<(Tensor<T>, usize)> {
    let [b, k, h, w] = match shape {
        &[b, k, h, w] => [b, k, h, w],
        _ => {
            return Err(TensorError::shape(
                "one_hot",
                format!("expected rank-4 logits, got {shape:?}"),
            ))
        }
    };
    let hw = h * w;
    if target.len() != b * hw {
        return Err(TensorError::shape(
            "one_hot",
            format!("target has {} labels, logits need {}", target.len(), b * hw),
        ));
    }
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    let mut n = 0;
    for (i, &label) in target.iter().enumerate() {
        if Some(label) == ignore {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(TensorError::invalid(
                "one_hot",
                format!("label {label} at pixel {i} is outside 0..{k}"),
            ));
        }
        let (bi, p) = (i / hw, i % hw);
        data[bi * k * hw + label * hw + p] = T::one();
        n += 1;
    }
    Ok((out, n))
}

fn contributing(op: &'static str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(TensorError::invalid(op, "every target pixel is ignored"));
    }
    Ok(())
}

/// Mean over contributing pixels of `−log softmax(logits)` at the true class.
pub fn cross_entropy<T: Scalar>(
    g: &Graph<T>,
    logits: &Var<T>,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<Var<T>> {
    let (y, n) = one_hot::<T>(logits.shape(), target, cfg.ignore_label)?;
    contributing("cross_entropy", n)?;
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(&logp, &g.constant(y))?;
    let s = g.sum_all(&picked)?;
    g.mul_scalar(&s, T::from_usize_lossy(n).recip().neg())
}

/// `1 − (2/N)·Σ ŷ·y / (ŷ + y + eps)` over contributing pixels and classes.
pub fn dice_loss<T: Scalar>(
    g: &Graph<T>,
    probs: &Var<T>,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<Var<T>> {
    let (y, n) = one_hot::<T>(probs.shape(), target, cfg.ignore_label)?;
    contributing("dice_loss", n)?;
    let y = g.constant(y);
    let num = g.mul(probs, &y)?;
    let den = g.add_scalar(&g.add(probs, &y)?, T::from_f64_lossy(cfg.dice_eps))?;
    let s = g.sum_all(&g.div(&num, &den)?)?;
    let scaled = g.mul_scalar(&s, T::from_f64_lossy(-2.0) / T::from_usize_lossy(n))?;
    g.add_scalar(&scaled, T::one())
}

/// `ce + dice (+ aux_weight · ce_aux)`; returns the differentiable total and
/// its decomposition.
pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    logits: &Var<T>,
    aux_logits: Option<&Var<T>>,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<(Var<T>, LossReport)> {
    cfg.validate()?;
    let ce = cross_entropy(g, logits, target, cfg)?;
    let probs = g.softmax(logits, 1)?;
    let dice = dice_loss(g, &probs, target, cfg)?;
    let mut total = g.add(&ce, &dice)?;
    let mut aux_value = 0.0;
    if let Some(aux) = aux_logits {
        let aux_ce = cross_entropy(g, aux, target, cfg)?;
        aux_value = aux_ce.value().item().as_f64();
        let weighted = g.mul_scalar(&aux_ce, T::from_f64_lossy(cfg.aux_weight))?;
        total = g.add(&total, &weighted)?;
    }
    let report = LossReport::from_parts(
        ce.value().item().as_f64(),
        dice.value().item().as_f64(),
        aux_value,
        cfg.aux_weight,
    );
    Ok((total, report))
}
