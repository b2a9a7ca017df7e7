//! Convolution–Mamba mixed block.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{join, Conv3d, ConvSpec, Module};
use crate::ssm::{Tom, TomConfig};
use crate::tensor::Tensor;

/// Channel-preserving block:
///
/// ```text
/// F1 = Conv5×5×5/s2(X)     F2 = Conv3(F1)   F3 = ToM(F2)   F4 = Conv3(F3)
/// F5 = ConvT5×5×5/s2(F4)   F6 = F5 + X      out = ToM(F6)
/// ```
pub struct Cmmb {
    pub down: Conv3d,
    pub conv_in: Conv3d,
    pub tom_inner: Tom,
    pub conv_out: Conv3d,
    pub up: Conv3d,
    pub tom_outer: Tom,
}

impl Cmmb {
    pub fn down_spec(c: usize) -> ConvSpec {
        ConvSpec::cubic(c, c, 5, 2, 2)
    }

    pub fn up_spec(c: usize) -> ConvSpec {
        ConvSpec::cubic_transposed(c, c, 5, 2, 2, 1)
    }

    pub fn new<R: Rng>(channels: usize, tom: TomConfig, rng: &mut R) -> Result<Self> {
        let c = channels;
        Ok(Cmmb {
            down: Conv3d::new(Self::down_spec(c), rng)?,
            conv_in: Conv3d::new(ConvSpec::cubic(c, c, 3, 1, 1), rng)?,
            tom_inner: Tom::new(tom, rng)?,
            conv_out: Conv3d::new(ConvSpec::cubic(c, c, 3, 1, 1), rng)?,
            up: Conv3d::new(Self::up_spec(c), rng)?,
            tom_outer: Tom::new(tom, rng)?,
        })
    }

    pub fn inner_convs(&self) -> [&Conv3d; 4] {
        [&self.down, &self.conv_in, &self.conv_out, &self.up]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 5 || x.shape()[2..].iter().any(|e| e % 2 != 0) {
            return Err(invalid(
                "cmmb",
                format!("spatial extents must be even, got {:?}", x.shape()),
            ));
        }
        let f = self.down.forward(x)?;
        let f = self.conv_in.forward(&f)?;
        let f = self.tom_inner.forward(&f)?;
        let f = self.conv_out.forward(&f)?;
        let f = self.up.forward(&f)?;
        self.tom_outer.forward(&f.add(x)?)
    }
}

impl Module for Cmmb {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.down.visit_params(&join(prefix, "down"), f);
        self.conv_in.visit_params(&join(prefix, "conv_in"), f);
        self.tom_inner.visit_params(&join(prefix, "tom_inner"), f);
        self.conv_out.visit_params(&join(prefix, "conv_out"), f);
        self.up.visit_params(&join(prefix, "up"), f);
        self.tom_outer.visit_params(&join(prefix, "tom_outer"), f);
    }
}
