//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use segresmamba::model::ModelConfig;
use segresmamba::nn::{NormKind, UnitOrder};
use segresmamba::Tensor;

/// Small model config with every structural knob randomized.
pub fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let groups = rng.random_range(1..=2);
    let mut channels = [0; 4];
    for c in channels.iter_mut() {
        *c = groups * rng.random_range(1..=4);
    }
    let mut cfg = ModelConfig::reduced(channels, groups);
    cfg.in_channels = rng.random_range(1..=3);
    cfg.num_classes = rng.random_range(2..=4);
    cfg.cmmb_per_stage = rng.random_range(1..=2);
    cfg.norm = if rng.random_bool(0.5) {
        NormKind::Group
    } else {
        NormKind::Instance
    };
    cfg.residual_order = if rng.random_bool(0.5) {
        UnitOrder::PreActivation
    } else {
        UnitOrder::PostActivation
    };
    cfg.mlp_skip.hidden_ratio = rng.random_range(1..=2);
    cfg.mlp_skip.instance_norm = rng.random_bool(0.5);
    cfg.mamba.d_state = rng.random_range(1..=4);
    cfg.mamba.expand = rng.random_range(1..=2);
    cfg.mamba.d_conv = rng.random_range(1..=4);
    cfg.mamba.layer_norm = rng.random_bool(0.5);
    cfg
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Trainable tensor with entries in [-1, 1).
pub fn rand_param(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::param(uniform(shape.iter().product(), -1.0, 1.0, rng), shape).unwrap()
}

/// Selective-scan recurrence written out one step at a time. Layouts as in
/// `ssm::scan`: u, delta `[B, L, D]`, a `[D, N]`, b, c `[B, L, N]`, d `[D]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    (bs, l, ch, n): (usize, usize, usize, usize),
) -> Vec<f64> {
    let mut y = vec![0.0; bs * l * ch];
    for bi in 0..bs {
        for di in 0..ch {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let i = (bi * l + t) * ch + di;
                let mut acc = 0.0;
                for k in 0..n {
                    h[k] = (delta[i] * a[di * n + k]).exp() * h[k]
                        + delta[i] * b[(bi * l + t) * n + k] * u[i];
                    acc += c[(bi * l + t) * n + k] * h[k];
                }
                y[i] = acc + d[di] * u[i];
            }
        }
    }
    y
}
