//! Convolution, normalization and decoder building blocks.

pub mod conv;
pub mod init;
pub mod mlp;
pub mod norm;
pub mod residual;
pub mod upsample;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tensor, Unary};

pub use conv::{conv3d, conv_transpose3d, Conv3d, ConvSpec};
pub use mlp::{MlpSkip, MlpSkipConfig};
pub use norm::{layer_norm, normalize, LayerNorm, Norm, NormKind, NormSpec, DEFAULT_EPS};
pub use residual::{ResidualBlock, UnitOrder};
pub use upsample::upsample_trilinear;

/// Anything that owns trainable tensors.
pub trait Module {
    /// Visits every parameter with its dotted path under `prefix`, in a fixed
    /// order.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

impl<M: Module> Module for [M] {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.as_slice().visit_params(prefix, f)
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Pointwise activation choice for configurable blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => x.unary(Unary::Relu),
            Activation::Silu => x.unary(Unary::Silu),
            Activation::Identity => Ok(x.clone()),
        }
    }
}
