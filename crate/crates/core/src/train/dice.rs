use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiceActivation {
    /// Mutually exclusive classes.
    #[default]
    Softmax,
    /// Independent (multi-label) channels.
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiceConfig {
    pub smooth: f64,
    pub activation: DiceActivation,
    pub include_background: bool,
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig {
            smooth: DEFAULT_SMOOTH,
            activation: DiceActivation::Softmax,
            include_background: true,
        }
    }
}

/// Sums `[N, C, ...]` over every axis except the channel axis, giving `[C]`.
fn per_class_sum(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let v = t.numel() / (n * c);
    t.reshape(&[n, c, v])?
        .permute(&[1, 0, 2])?
        .reshape(&[c, n * v])?
        .sum_last_axis()
}

/// Soft dice from probabilities: `1 − mean_c (2·Σp·t + s) / (Σp + Σt + s)`.
pub fn soft_dice_from_probs(
    probs: &Tensor,
    target: &Tensor,
    smooth: f64,
    include_background: bool,
) -> Result<Tensor> {
    if probs.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: probs.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if probs.shape().len() < 3 {
        return Err(invalid(
            "dice_loss",
            format!("need [N, C, ...], got {:?}", probs.shape()),
        ));
    }
    let c = probs.shape()[1];
    let skip = usize::from(!include_background);
    if skip >= c {
        return Err(invalid(
            "dice_loss",
            "no classes left after excluding background",
        ));
    }
    let inter = per_class_sum(&probs.mul(target)?)?;
    let denom = per_class_sum(probs)?
        .add(&per_class_sum(target)?)?
        .add_scalar(smooth)?;
    let dice = inter.mul_scalar(2.0)?.add_scalar(smooth)?.div(&denom)?;
    let dice = if skip > 0 {
        dice.narrow(0, skip, c - skip)?
    } else {
        dice
    };
    dice.mean()?.neg()?.add_scalar(1.0)
}

/// Dice loss on raw logits; the activation is applied over the channel axis.
pub fn dice_loss(logits: &Tensor, target: &Tensor, cfg: &DiceConfig) -> Result<Tensor> {
    let probs = match cfg.activation {
        DiceActivation::Softmax => logits.softmax(1)?,
        DiceActivation::Sigmoid => logits.sigmoid()?,
    };
    soft_dice_from_probs(&probs, target, cfg.smooth, cfg.include_background)
}

/// One-hot encodes `labels` (voxel order of `[D, H, W]`) as `[1, C, D, H, W]`.
pub fn one_hot(labels: &[usize], num_classes: usize, extents: [usize; 3]) -> Result<Tensor> {
    let v: usize = extents.iter().product();
    if labels.len() != v {
        return Err(invalid(
            "one_hot",
            format!("{} labels for extents {extents:?}", labels.len()),
        ));
    }
    let mut data = vec![0.0; num_classes * v];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(invalid(
                "one_hot",
                format!("label {l} ≥ {num_classes} classes"),
            ));
        }
        data[l * v + i] = 1.0;
    }
    Tensor::new(data, &[1, num_classes, extents[0], extents[1], extents[2]])
}

/// Per-voxel argmax over the channel axis of `[N, C, ...]`, lowest index on ties.
/// Output is batch-major voxel order.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let v = logits.numel() / (n * c);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * v);
    for b in 0..n {
        let base = b * c * v;
        for i in 0..v {
            let mut best = 0;
            for k in 1..c {
                if d[base + k * v + i] > d[base + best * v + i] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Hard dice per class. A class absent from both masks scores 1.0.
pub fn dice_metric(
    pred: &[usize],
    target: &[usize],
    num_classes: usize,
    include_background: bool,
) -> Result<DiceScores> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_metric",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let mut inter = vec![0usize; num_classes];
    let mut p_count = vec![0usize; num_classes];
    let mut t_count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p >= num_classes || t >= num_classes {
            return Err(invalid(
                "dice_metric",
                format!("label out of range for {num_classes} classes"),
            ));
        }
        p_count[p] += 1;
        t_count[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|k| {
            let denom = p_count[k] + t_count[k];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / denom as f64
            }
        })
        .collect();
    let counted = &per_class[usize::from(!include_background).min(num_classes)..];
    let mean = if counted.is_empty() {
        1.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok(DiceScores { per_class, mean })
}
