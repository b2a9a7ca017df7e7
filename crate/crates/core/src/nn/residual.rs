use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Conv3d, ConvSpec, Module, Norm, NormSpec};
use crate::error::Result;
use crate::tensor::Tensor;

/// Ordering of the norm / activation / conv triple inside one residual unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnitOrder {
    /// GroupNorm → ReLU → Conv.
    #[default]
    PreActivation,
    /// Conv → GroupNorm → ReLU.
    PostActivation,
}

struct Unit {
    norm: Norm,
    conv: Conv3d,
}

impl Unit {
    fn forward(&self, x: &Tensor, order: UnitOrder) -> Result<Tensor> {
        match order {
            UnitOrder::PreActivation => self.conv.forward(&self.norm.forward(x)?.relu()?),
            UnitOrder::PostActivation => self.norm.forward(&self.conv.forward(x)?)?.relu(),
        }
    }
}

/// Two GroupNorm/ReLU/Conv3×3×3 units with an identity skip around both.
pub struct ResidualBlock {
    units: [Unit; 2],
    pub order: UnitOrder,
}

impl ResidualBlock {
    pub fn new<R: Rng>(
        channels: usize,
        groups: usize,
        order: UnitOrder,
        rng: &mut R,
    ) -> Result<Self> {
        let unit = |rng: &mut R| -> Result<Unit> {
            Ok(Unit {
                norm: Norm::new(NormSpec::group(channels, groups))?,
                conv: Conv3d::new(ConvSpec::cubic(channels, channels, 3, 1, 1), rng)?,
            })
        };
        Ok(ResidualBlock {
            units: [unit(rng)?, unit(rng)?],
            order,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.units[0].forward(x, self.order)?;
        let h = self.units[1].forward(&h, self.order)?;
        x.add(&h)
    }

    pub fn convs(&self) -> [&Conv3d; 2] {
        [&self.units[0].conv, &self.units[1].conv]
    }
}

impl Module for ResidualBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, u) in self.units.iter().enumerate() {
            let p = join(prefix, &format!("unit{i}"));
            u.norm.visit_params(&join(&p, "norm"), f);
            u.conv.visit_params(&join(&p, "conv"), f);
        }
    }
}
