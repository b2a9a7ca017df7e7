//! Token-wise MLP on encoder skip features, followed by instance norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Activation, Conv3d, ConvSpec, Module, Norm, NormSpec};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSkipConfig {
    /// Hidden width as a multiple of the channel count.
    pub hidden_ratio: usize,
    pub activation: Activation,
    pub instance_norm: bool,
}

impl Default for MlpSkipConfig {
    fn default() -> Self {
        MlpSkipConfig {
            hidden_ratio: 1,
            activation: Activation::Silu,
            instance_norm: true,
        }
    }
}

/// Two 1×1×1 convolutions with an activation between them, then an optional
/// affine instance norm. Channel-preserving.
pub struct MlpSkip {
    pub fc1: Conv3d,
    pub fc2: Conv3d,
    pub activation: Activation,
    pub norm: Option<Norm>,
}

impl MlpSkip {
    pub fn new<R: Rng>(channels: usize, cfg: &MlpSkipConfig, rng: &mut R) -> Result<Self> {
        let hidden = channels * cfg.hidden_ratio.max(1);
        Ok(MlpSkip {
            fc1: Conv3d::new(ConvSpec::cubic(channels, hidden, 1, 1, 0), rng)?,
            fc2: Conv3d::new(ConvSpec::cubic(hidden, channels, 1, 1, 0), rng)?,
            activation: cfg.activation,
            norm: if cfg.instance_norm {
                Some(Norm::new(NormSpec::instance(channels))?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.fc1.forward(x)?)?;
        let y = self.fc2.forward(&h)?;
        match &self.norm {
            Some(norm) => norm.forward(&y),
            None => Ok(y),
        }
    }
}

impl Module for MlpSkip {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
        if let Some(norm) = &self.norm {
            norm.visit_params(&join(prefix, "norm"), f);
        }
    }
}
