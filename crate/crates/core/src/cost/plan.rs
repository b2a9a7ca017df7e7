//! Static per-layer cost plan of a [`ModelConfig`].

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Decoder;
use crate::model::{Cmmb, EncoderStage, ModelConfig};
use crate::nn::{ConvSpec, NormSpec, UnitOrder};
use crate::ssm::tom::BRANCH_NAMES;
use crate::ssm::MambaBlockSpec;

/// FLOPs charged per element by a normalization layer (mean, variance,
/// scale, affine).
pub const NORM_FLOPS_PER_ELEMENT: u64 = 5;
/// FLOPs per output element of trilinear upsampling: eight weighted taps.
pub const UPSAMPLE_FLOPS_PER_ELEMENT: u64 = 15;
pub const ADD_FLOPS_PER_ELEMENT: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Norm,
    Mamba,
    Upsample,
    Add,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::ConvTranspose => "conv_transpose",
            LayerKind::Norm => "norm",
            LayerKind::Mamba => "mamba",
            LayerKind::Upsample => "upsample",
            LayerKind::Add => "add",
        }
    }
}

/// One row of the plan. `name` is the parameter prefix of the layer in the
/// live model. Counts are per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    /// Elements this layer keeps alive for the backward pass.
    pub activations: u64,
}

fn vol(e: [usize; 3]) -> u64 {
    e.iter().map(|&v| v as u64).product()
}

/// Elements a Mamba block retains per token: in_proj output (2·Di), conv and
/// SiLU outputs, x_proj output, Δ before and after softplus, the scan's
/// hidden states (Di·N), scan output, gate, gated product and out_proj output.
pub fn mamba_activations_per_token(spec: &MambaBlockSpec) -> u64 {
    let (d, di, n, r) = (spec.d_model, spec.d_inner(), spec.d_state, spec.dt_rank());
    (8 * di + r + 2 * n + di * n + d) as u64
}

struct Planner {
    rows: Vec<LayerCost>,
}

impl Planner {
    fn conv(&mut self, name: String, spec: &ConvSpec, input: [usize; 3]) -> Result<[usize; 3]> {
        let out = spec.out_extents(input)?;
        let macs = spec.macs(input)?;
        self.rows.push(LayerCost {
            name,
            kind: if spec.transposed {
                LayerKind::ConvTranspose
            } else {
                LayerKind::Conv
            },
            params: spec.param_count() as u64,
            macs,
            flops: 2 * macs,
            activations: spec.out_channels as u64 * vol(out),
        });
        Ok(out)
    }

    fn norm(&mut self, name: String, params: usize, channels: usize, voxels: u64) {
        let elems = channels as u64 * voxels;
        self.rows.push(LayerCost {
            name,
            kind: LayerKind::Norm,
            params: params as u64,
            macs: 0,
            flops: NORM_FLOPS_PER_ELEMENT * elems,
            activations: elems,
        });
    }

    fn elementwise(&mut self, name: String, kind: LayerKind, per_element: u64, elems: u64) {
        self.rows.push(LayerCost {
            name,
            kind,
            params: 0,
            macs: 0,
            flops: per_element * elems,
            activations: elems,
        });
    }

    fn tom(&mut self, prefix: &str, cfg: &ModelConfig, channels: usize, extents: [usize; 3]) {
        let tom = cfg.mamba.tom(channels);
        let tokens = vol(extents);
        for branch in BRANCH_NAMES {
            if tom.layer_norm {
                self.norm(
                    format!("{prefix}.{branch}.norm"),
                    2 * channels,
                    channels,
                    tokens,
                );
            }
            let macs = tom.mamba.macs(tokens as usize);
            self.rows.push(LayerCost {
                name: format!("{prefix}.{branch}.mamba"),
                kind: LayerKind::Mamba,
                params: tom.mamba.param_count() as u64,
                macs,
                flops: 2 * macs,
                activations: mamba_activations_per_token(&tom.mamba) * tokens,
            });
        }
        // two additions combine the three branches
        self.elementwise(
            format!("{prefix}.sum"),
            LayerKind::Add,
            2 * ADD_FLOPS_PER_ELEMENT,
            channels as u64 * tokens,
        );
    }

    fn cmmb(
        &mut self,
        prefix: &str,
        cfg: &ModelConfig,
        c: usize,
        extents: [usize; 3],
    ) -> Result<()> {
        let inner = self.conv(format!("{prefix}.down"), &Cmmb::down_spec(c), extents)?;
        let same = ConvSpec::cubic(c, c, 3, 1, 1);
        self.conv(format!("{prefix}.conv_in"), &same, inner)?;
        self.tom(&format!("{prefix}.tom_inner"), cfg, c, inner);
        self.conv(format!("{prefix}.conv_out"), &same, inner)?;
        self.conv(format!("{prefix}.up"), &Cmmb::up_spec(c), inner)?;
        self.elementwise(
            format!("{prefix}.residual"),
            LayerKind::Add,
            ADD_FLOPS_PER_ELEMENT,
            c as u64 * vol(extents),
        );
        self.tom(&format!("{prefix}.tom_outer"), cfg, c, extents);
        Ok(())
    }

    fn conv_norm_act(
        &mut self,
        prefix: &str,
        spec: &ConvSpec,
        cfg: &ModelConfig,
        input: [usize; 3],
    ) -> Result<[usize; 3]> {
        let out = self.conv(format!("{prefix}.conv"), spec, input)?;
        let c = spec.out_channels;
        self.norm(
            format!("{prefix}.norm"),
            cfg.norm_spec(c).param_count(),
            c,
            vol(out),
        );
        Ok(out)
    }
}

/// Per-layer costs for one sample with spatial `extents`, in forward order.
/// Parameter counts do not depend on `extents`.
pub fn layer_plan(cfg: &ModelConfig, extents: [usize; 3]) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    cfg.validate_extents(extents)?;
    let mut p = Planner { rows: Vec::new() };
    let c = cfg.stage_channels;

    let mut e = extents;
    let mut stage_extents = [[0; 3]; 4];
    for k in 0..4 {
        let prefix = format!("encoder.stage{}", k + 1);
        let specs = EncoderStage::conv_specs(k, cfg);
        let (down, refine) = specs.split_last().expect("every stage has a down conv");
        if let Some(r) = refine.first() {
            e = p.conv_norm_act(&format!("{prefix}.refine"), r, cfg, e)?;
        }
        e = p.conv_norm_act(&format!("{prefix}.down"), down, cfg, e)?;
        for i in 0..cfg.cmmb_per_stage {
            p.cmmb(&format!("{prefix}.cmmb{i}"), cfg, c[k], e)?;
        }
        stage_extents[k] = e;
    }
    for k in 0..3 {
        let prefix = format!("encoder.skip{}", k + 1);
        let hidden = c[k] * cfg.mlp_skip.hidden_ratio.max(1);
        let e = stage_extents[k];
        p.conv(
            format!("{prefix}.fc1"),
            &ConvSpec::cubic(c[k], hidden, 1, 1, 0),
            e,
        )?;
        p.conv(
            format!("{prefix}.fc2"),
            &ConvSpec::cubic(hidden, c[k], 1, 1, 0),
            e,
        )?;
        if cfg.mlp_skip.instance_norm {
            p.norm(
                format!("{prefix}.norm"),
                NormSpec::instance(c[k]).param_count(),
                c[k],
                vol(e),
            );
        }
    }

    let mut h = stage_extents[3];
    let mut in_ch = c[3];
    for (k, out_ch) in cfg.decoder_channels().into_iter().enumerate() {
        let prefix = format!("decoder.stage{}", k + 1);
        h = p.conv(
            format!("{prefix}.proj"),
            &ConvSpec::cubic(in_ch, out_ch, 1, 1, 0),
            h,
        )?;
        h = h.map(|v| 2 * v);
        let elems = out_ch as u64 * vol(h);
        p.elementwise(
            format!("{prefix}.upsample"),
            LayerKind::Upsample,
            UPSAMPLE_FLOPS_PER_ELEMENT,
            elems,
        );
        p.elementwise(
            format!("{prefix}.skip_add"),
            LayerKind::Add,
            ADD_FLOPS_PER_ELEMENT,
            elems,
        );
        let norm_params = NormSpec::group(out_ch, cfg.norm_spec(out_ch).groups()).param_count();
        let conv = ConvSpec::cubic(out_ch, out_ch, 3, 1, 1);
        for u in 0..2 {
            let unit = format!("{prefix}.res.unit{u}");
            match cfg.residual_order {
                UnitOrder::PreActivation => {
                    p.norm(format!("{unit}.norm"), norm_params, out_ch, vol(h));
                    p.conv(format!("{unit}.conv"), &conv, h)?;
                }
                UnitOrder::PostActivation => {
                    p.conv(format!("{unit}.conv"), &conv, h)?;
                    p.norm(format!("{unit}.norm"), norm_params, out_ch, vol(h));
                }
            }
        }
        p.elementwise(
            format!("{prefix}.res.add"),
            LayerKind::Add,
            ADD_FLOPS_PER_ELEMENT,
            elems,
        );
        in_ch = out_ch;
    }
    p.conv("decoder.head".into(), &Decoder::head_spec(cfg), h)?;
    Ok(p.rows)
}
