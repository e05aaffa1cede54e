//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{ParamKind, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW optimizer state beyond the per-parameter moments (which live in
/// the [`ParamStore`]).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0 }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    /// One update of every trainable parameter that holds a gradient.
    ///
    /// Decay is applied to the weights directly (`p -= lr·λ·p`), then the
    /// bias-corrected Adam step `p -= lr·m̂/(√v̂ + eps)`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 || !lr.is_finite() {
            return Err(TensorError::invalid(
                "adamw_step",
                format!("learning rate must be positive, got {lr}"),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = T::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let decay = f(1.0 - lr * c.weight_decay);
        let (lr_t, bc1, bc2) = (f(lr), f(bc1), f(bc2));
        for p in store.iter_mut() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let shape = grad.shape().to_vec();
            let mut m = p
                .first_moment
                .take()
                .unwrap_or_else(|| Tensor::zeros(&shape));
            let mut v = p
                .second_moment
                .take()
                .unwrap_or_else(|| Tensor::zeros(&shape));
            let value = p.value_mut();
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            p.first_moment = Some(m);
            p.second_moment = Some(v);
            p.grad = Some(grad);
        }
        Ok(())
    }
}

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TensorError::invalid(
            "cosine_lr",
            "total_steps must be positive",
        ));
    }
    if step > total_steps {
        return Err(TensorError::invalid(
            "cosine_lr",
            format!("step {step} beyond total {total_steps}"),
        ));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
