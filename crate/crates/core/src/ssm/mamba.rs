use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv1d::causal_depthwise_conv1d;
use super::scan::{scan, DEFAULT_SCAN_CHUNK};
use crate::error::{invalid, Result};
use crate::nn::{init, join, Module, DEFAULT_EPS};
use crate::tensor::Tensor;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 0.1;
const DT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaBlockSpec {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    /// Rank of the Δ projection; `None` means `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub layer_norm_eps: f64,
    pub scan_chunk: usize,
}

impl Default for MambaBlockSpec {
    fn default() -> Self {
        MambaBlockSpec {
            d_model: 96,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            dt_rank: None,
            layer_norm_eps: DEFAULT_EPS,
            scan_chunk: DEFAULT_SCAN_CHUNK,
        }
    }
}

impl MambaBlockSpec {
    pub fn with_d_model(d_model: usize) -> Self {
        MambaBlockSpec {
            d_model,
            ..Default::default()
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or(self.d_model.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.d_state == 0
            || self.expand == 0
            || self.d_conv == 0
            || self.dt_rank() == 0
        {
            return Err(invalid(
                "mamba",
                format!("all sizes must be positive: {self:?}"),
            ));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(invalid("mamba", "layer_norm_eps must be positive"));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, di, n, r, k) = (
            self.d_model,
            self.d_inner(),
            self.d_state,
            self.dt_rank(),
            self.d_conv,
        );
        vec![
            ("in_proj", vec![2 * di, d]),
            ("conv_weight", vec![di, k]),
            ("conv_bias", vec![di]),
            ("x_proj", vec![r + 2 * n, di]),
            ("dt_weight", vec![di, r]),
            ("dt_bias", vec![di]),
            ("a_log", vec![di, n]),
            ("d", vec![di]),
            ("out_proj", vec![d, di]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Multiply-accumulates for a `[B, L, d_model]` input.
    pub fn macs(&self, tokens: usize) -> u64 {
        let (d, di, n, r, k) = (
            self.d_model,
            self.d_inner(),
            self.d_state,
            self.dt_rank(),
            self.d_conv,
        );
        let per_token = d * 2 * di
            + di * k
            + di * (r + 2 * n)
            + r * di
            + super::scan::SCAN_MACS_PER_ELEMENT as usize * di * n
            + di * d;
        (tokens * per_token) as u64
    }
}

/// Input-dependent SSM parameters: projection to (Δ-rank, B, C), the Δ
/// up-projection, `A = −exp(a_log)` and the skip `D`.
pub struct SsmParams {
    pub x_proj: Tensor,
    pub dt_weight: Tensor,
    pub dt_bias: Tensor,
    pub a_log: Tensor,
    pub d: Tensor,
    pub d_state: usize,
    pub dt_rank: usize,
    pub chunk: usize,
}

impl SsmParams {
    pub fn new<R: Rng>(
        d_inner: usize,
        d_state: usize,
        dt_rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dt_bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt = rng
                    .random_range(DT_MIN.ln()..DT_MAX.ln())
                    .exp()
                    .max(DT_FLOOR);
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let a_log = (0..d_inner)
            .flat_map(|_| (1..=d_state).map(|n| (n as f64).ln()))
            .collect();
        Ok(SsmParams {
            x_proj: init::uniform(
                &[dt_rank + 2 * d_state, d_inner],
                (d_inner as f64).powf(-0.5),
                rng,
            )?,
            dt_weight: init::uniform(&[d_inner, dt_rank], (dt_rank as f64).powf(-0.5), rng)?,
            dt_bias: Tensor::param(dt_bias, &[d_inner])?,
            a_log: Tensor::param(a_log, &[d_inner, d_state])?,
            d: init::constant(&[d_inner], 1.0)?,
            d_state,
            dt_rank,
            chunk: DEFAULT_SCAN_CHUNK,
        })
    }
}

/// Runs the selective scan on `u: [L, D]` or `[B, L, D]`, deriving Δ, B and C
/// from `u` itself.
pub fn selective_scan(u: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let rank2 = u.shape().len() == 2;
    let u3 = match u.shape() {
        &[l, d] => u.reshape(&[1, l, d])?,
        &[_, _, _] => u.clone(),
        s => {
            return Err(invalid(
                "selective_scan",
                format!("need [L, D] or [B, L, D], got {s:?}"),
            ))
        }
    };
    let (n, r) = (p.d_state, p.dt_rank);
    let dbc = u3.linear(&p.x_proj, None)?;
    let delta = dbc
        .narrow(2, 0, r)?
        .linear(&p.dt_weight, Some(&p.dt_bias))?
        .softplus()?;
    let b = dbc.narrow(2, r, n)?;
    let c = dbc.narrow(2, r + n, n)?;
    let a = p.a_log.exp()?.neg()?;
    let y = scan(&u3, &delta, &a, &b, &c, &p.d, p.chunk)?;
    if rank2 {
        y.reshape(u.shape())
    } else {
        Ok(y)
    }
}

/// Gated selective-SSM block on `[B, L, d_model]` tokens.
pub struct MambaBlock {
    pub spec: MambaBlockSpec,
    pub in_proj: Tensor,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub ssm: SsmParams,
    pub out_proj: Tensor,
}

impl MambaBlock {
    pub fn new<R: Rng>(spec: MambaBlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (d, di, k) = (spec.d_model, spec.d_inner(), spec.d_conv);
        let conv_bound = (k as f64).powf(-0.5);
        let mut ssm = SsmParams::new(di, spec.d_state, spec.dt_rank(), rng)?;
        ssm.chunk = spec.scan_chunk;
        Ok(MambaBlock {
            spec,
            in_proj: init::uniform(&[2 * di, d], (d as f64).powf(-0.5), rng)?,
            conv_weight: init::uniform(&[di, k], conv_bound, rng)?,
            conv_bias: init::uniform(&[di], conv_bound, rng)?,
            ssm,
            out_proj: init::uniform(&[d, di], (di as f64).powf(-0.5), rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.spec.d_model;
        if x.shape().len() != 3 || x.shape()[2] != d {
            return Err(invalid(
                "mamba",
                format!("need [B, L, {d}], got {:?}", x.shape()),
            ));
        }
        let di = self.spec.d_inner();
        let xz = x.linear(&self.in_proj, None)?;
        let u = causal_depthwise_conv1d(&xz.narrow(2, 0, di)?, &self.conv_weight, &self.conv_bias)?
            .silu()?;
        let y = selective_scan(&u, &self.ssm)?;
        let gated = y.mul(&xz.narrow(2, di, di)?.silu()?)?;
        gated.linear(&self.out_proj, None)
    }
}

impl Module for MambaBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        let s = &self.ssm;
        let params = [
            &self.in_proj,
            &self.conv_weight,
            &self.conv_bias,
            &s.x_proj,
            &s.dt_weight,
            &s.dt_bias,
            &s.a_log,
            &s.d,
            &self.out_proj,
        ];
        for ((name, _), t) in self.spec.param_shapes().into_iter().zip(params) {
            f(join(prefix, name), t);
        }
    }
}
