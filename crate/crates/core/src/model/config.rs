use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpSkipConfig, NormKind, NormSpec, UnitOrder, DEFAULT_EPS};
use crate::ssm::{InterSliceOrder, MambaBlockSpec, TomConfig, DEFAULT_SCAN_CHUNK};

pub const BOTTLENECK_CHANNELS: usize = 768;
/// Four stride-2 reductions, plus the bottleneck CMMB's own halving which
/// needs an even stage-4 extent.
pub const SPATIAL_DIVISOR: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub scan_chunk: usize,
    pub layer_norm: bool,
    pub inter_slice: InterSliceOrder,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            d_state: 16,
            expand: 2,
            d_conv: 4,
            scan_chunk: DEFAULT_SCAN_CHUNK,
            layer_norm: true,
            inter_slice: InterSliceOrder::DepthFastest,
        }
    }
}

impl MambaConfig {
    pub fn tom(&self, d_model: usize) -> TomConfig {
        TomConfig {
            mamba: MambaBlockSpec {
                d_model,
                d_state: self.d_state,
                expand: self.expand,
                d_conv: self.d_conv,
                dt_rank: None,
                layer_norm_eps: DEFAULT_EPS,
                scan_chunk: self.scan_chunk,
            },
            layer_norm: self.layer_norm,
            inter_slice: self.inter_slice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; 4],
    pub cmmb_per_stage: usize,
    pub mamba: MambaConfig,
    pub norm: NormKind,
    pub norm_groups: usize,
    pub mlp_skip: MlpSkipConfig,
    pub residual_order: UnitOrder,
    pub input_extents: [usize; 3],
    /// Allows a bottleneck width other than 768 (reduced test and desk-scale models).
    pub waive_bottleneck_invariant: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            num_classes: 3,
            stage_channels: [96, 192, 384, BOTTLENECK_CHANNELS],
            cmmb_per_stage: 1,
            mamba: MambaConfig::default(),
            norm: NormKind::Group,
            norm_groups: 8,
            mlp_skip: MlpSkipConfig::default(),
            residual_order: UnitOrder::PreActivation,
            input_extents: [32, 32, 32],
            waive_bottleneck_invariant: false,
        }
    }
}

impl ModelConfig {
    /// Reduced-width variant with the bottleneck invariant waived.
    pub fn reduced(stage_channels: [usize; 4], norm_groups: usize) -> Self {
        ModelConfig {
            stage_channels,
            norm_groups,
            waive_bottleneck_invariant: true,
            ..Default::default()
        }
    }

    pub fn norm_spec(&self, channels: usize) -> NormSpec {
        match self.norm {
            NormKind::Group => NormSpec::group(channels, self.norm_groups),
            NormKind::Instance => NormSpec::instance(channels),
        }
    }

    /// Output channels of each decoder stage's 1×1×1 projection, deepest first.
    pub fn decoder_channels(&self) -> [usize; 3] {
        let c = self.stage_channels;
        [c[2], c[1], c[0]]
    }

    /// Spatial extents after encoder stage `k` (1-based).
    pub fn stage_extents(&self, input: [usize; 3], k: usize) -> [usize; 3] {
        input.map(|e| e >> k)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.num_classes == 0 {
            return fail("in_channels and num_classes must be positive".into());
        }
        if self.stage_channels.contains(&0) {
            return fail(format!(
                "stage_channels must be positive, got {:?}",
                self.stage_channels
            ));
        }
        if self.stage_channels[3] != BOTTLENECK_CHANNELS && !self.waive_bottleneck_invariant {
            return fail(format!(
                "bottleneck must have {BOTTLENECK_CHANNELS} channels, got {} (set waive_bottleneck_invariant to override)",
                self.stage_channels[3]
            ));
        }
        if self.cmmb_per_stage == 0 {
            return fail("cmmb_per_stage must be at least 1".into());
        }
        if self.mamba.d_state == 0
            || self.mamba.expand == 0
            || self.mamba.d_conv == 0
            || self.mamba.scan_chunk == 0
        {
            return fail(format!("mamba sizes must be positive: {:?}", self.mamba));
        }
        for &c in &self.stage_channels {
            self.norm_spec(c)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        self.validate_extents(self.input_extents)
    }

    pub fn validate_extents(&self, extents: [usize; 3]) -> Result<()> {
        if extents.iter().any(|&e| e == 0 || e % SPATIAL_DIVISOR != 0) {
            return Err(Error::Config(format!(
                "spatial extents must be positive multiples of {SPATIAL_DIVISOR}, got {extents:?}"
            )));
        }
        Ok(())
    }
}
