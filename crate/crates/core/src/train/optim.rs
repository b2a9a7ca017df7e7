use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        OptimState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            config,
        }
    }
}

/// One AdamW update with learning rate `lr` using each parameter's current
/// `.grad` (missing gradients count as zero). Decay is decoupled:
/// `p ← p·(1 − lr·wd)` first, then the bias-corrected Adam step.
pub fn adamw_step(params: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![state.m.len()],
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![state.m[i].len()],
            });
        }
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(invalid("adamw_step", format!("bad learning rate {lr}")));
    }
    state.step += 1;
    let AdamWConfig {
        betas: (b1, b2),
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - lr * weight_decay;
    for (i, p) in params.iter().enumerate() {
        let grad = p.grad();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update_data(|data| {
            for (j, x) in data.iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let (mh, vh) = (m[j] / c1, v[j] / c2);
                *x = *x * decay - lr * mh / (vh.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(invalid(
            "cosine_lr",
            format!("step {step} beyond {total_steps}"),
        ));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
