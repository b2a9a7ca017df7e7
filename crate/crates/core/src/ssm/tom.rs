//! Tri-oriented sequence mixing over a 3-D feature map: a forward raster
//! scan, its reverse, and an inter-slice scan where depth varies fastest.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mamba::{MambaBlock, MambaBlockSpec};
use crate::error::{invalid, Result};
use crate::nn::{join, LayerNorm, Module};
use crate::tensor::Tensor;

/// Token ordering of the inter-slice branch, named by its fastest-varying axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterSliceOrder {
    /// (H, W, D) from slowest to fastest.
    #[default]
    DepthFastest,
    /// (D, W, H) from slowest to fastest.
    HeightFastest,
}

impl InterSliceOrder {
    /// Spatial axes of `[N, C, D, H, W]`, slowest first.
    pub fn axes(self) -> [usize; 3] {
        match self {
            InterSliceOrder::DepthFastest => [3, 4, 2],
            InterSliceOrder::HeightFastest => [2, 4, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TomConfig {
    pub mamba: MambaBlockSpec,
    /// Per-branch LayerNorm in front of each Mamba block.
    pub layer_norm: bool,
    pub inter_slice: InterSliceOrder,
}

impl Default for TomConfig {
    fn default() -> Self {
        TomConfig {
            mamba: MambaBlockSpec::default(),
            layer_norm: true,
            inter_slice: InterSliceOrder::DepthFastest,
        }
    }
}

const RASTER: [usize; 3] = [2, 3, 4];

/// `[N, C, D, H, W]` → `[N, L, C]` with spatial axes visited in `axes` order.
pub fn flatten_tokens(x: &Tensor, axes: [usize; 3]) -> Result<Tensor> {
    let s = x.shape();
    let t = x.permute(&[0, axes[0], axes[1], axes[2], 1])?;
    t.reshape(&[s[0], s[2] * s[3] * s[4], s[1]])
}

/// Inverse of [`flatten_tokens`] for a target shape `[N, C, D, H, W]`.
pub fn unflatten_tokens(t: &Tensor, axes: [usize; 3], shape: &[usize]) -> Result<Tensor> {
    let perm = [0, axes[0], axes[1], axes[2], 1];
    let permuted: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
    let mut inverse = [0; 5];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    t.reshape(&permuted)?.permute(&inverse)
}

struct Branch {
    norm: Option<LayerNorm>,
    mamba: MambaBlock,
}

impl Branch {
    fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        match &self.norm {
            Some(n) => self.mamba.forward(&n.forward(tokens)?),
            None => self.mamba.forward(tokens),
        }
    }
}

pub struct Tom {
    pub config: TomConfig,
    branches: [Branch; 3],
}

pub const BRANCH_NAMES: [&str; 3] = ["forward", "reverse", "inter_slice"];

impl Tom {
    pub fn new<R: Rng>(config: TomConfig, rng: &mut R) -> Result<Self> {
        let mut branch = || -> Result<Branch> {
            Ok(Branch {
                norm: if config.layer_norm {
                    Some(LayerNorm::new(
                        config.mamba.d_model,
                        config.mamba.layer_norm_eps,
                    )?)
                } else {
                    None
                },
                mamba: MambaBlock::new(config.mamba, rng)?,
            })
        };
        Ok(Tom {
            config,
            branches: [branch()?, branch()?, branch()?],
        })
    }

    pub fn mamba_blocks(&self) -> [&MambaBlock; 3] {
        [
            &self.branches[0].mamba,
            &self.branches[1].mamba,
            &self.branches[2].mamba,
        ]
    }

    /// `x: [N, C, D, H, W]` with `C == d_model`; output has the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        if s.len() != 5 || s[1] != self.config.mamba.d_model {
            return Err(invalid(
                "tom",
                format!(
                    "need [N, {}, D, H, W], got {s:?}",
                    self.config.mamba.d_model
                ),
            ));
        }
        let tokens = flatten_tokens(x, RASTER)?;
        let fwd = unflatten_tokens(&self.branches[0].forward(&tokens)?, RASTER, &s)?;
        let rev = self.branches[1].forward(&tokens.flip(1)?)?.flip(1)?;
        let rev = unflatten_tokens(&rev, RASTER, &s)?;
        let axes = self.config.inter_slice.axes();
        let inter = self.branches[2].forward(&flatten_tokens(x, axes)?)?;
        let inter = unflatten_tokens(&inter, axes, &s)?;
        fwd.add(&rev)?.add(&inter)
    }
}

impl Module for Tom {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (b, name) in self.branches.iter().zip(BRANCH_NAMES) {
            let p = join(prefix, name);
            if let Some(n) = &b.norm {
                n.visit_params(&join(&p, "norm"), f);
            }
            b.mamba.visit_params(&join(&p, "mamba"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_projection};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::param(
            (0..shape.iter().product())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            shape,
        )
        .unwrap()
    }

    fn small_config(c: usize) -> TomConfig {
        TomConfig {
            mamba: MambaBlockSpec {
                d_model: c,
                d_state: 2,
                d_conv: 2,
                scan_chunk: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&[2, 3, 2, 3, 4], &mut rng);
        for axes in [
            RASTER,
            InterSliceOrder::DepthFastest.axes(),
            InterSliceOrder::HeightFastest.axes(),
        ] {
            let t = flatten_tokens(&x, axes).unwrap();
            assert_eq!(t.shape(), &[2, 24, 3]);
            assert_eq!(
                unflatten_tokens(&t, axes, x.shape()).unwrap().to_vec(),
                x.to_vec()
            );
        }
    }

    #[test]
    fn inter_slice_tokens_vary_depth_fastest() {
        let (d, h, w) = (3, 2, 2);
        let x = Tensor::new((0..d * h * w).map(|v| v as f64).collect(), &[1, 1, d, h, w]).unwrap();
        let t = flatten_tokens(&x, InterSliceOrder::DepthFastest.axes())
            .unwrap()
            .to_vec();
        // token k = (h, w, d) visits voxel index d·H·W + h·W + w
        let expected: Vec<f64> = (0..h)
            .flat_map(|hi| {
                (0..w).flat_map(move |wi| (0..d).map(move |di| (di * h * w + hi * w + wi) as f64))
            })
            .collect();
        assert_eq!(t, expected);
    }

    #[test]
    fn preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tom = Tom::new(small_config(4), &mut rng).unwrap();
        let y = tom
            .forward(&rand_tensor(&[1, 4, 2, 3, 2], &mut rng))
            .unwrap();
        assert_eq!(y.shape(), &[1, 4, 2, 3, 2]);
    }

    #[test]
    fn reverse_branch_equals_reversed_forward_scan() {
        // With only the reverse branch active, output at raster position t
        // equals a plain forward scan of the reversed sequence.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_config(3);
        let tom = Tom::new(cfg, &mut rng).unwrap();
        for i in [0, 2] {
            tom.branches[i]
                .mamba
                .out_proj
                .set_data(vec![0.0; tom.branches[i].mamba.out_proj.numel()])
                .unwrap();
        }
        let x = rand_tensor(&[1, 3, 2, 2, 3], &mut rng);
        let y = flatten_tokens(&tom.forward(&x).unwrap(), RASTER)
            .unwrap()
            .to_vec();

        let tokens = flatten_tokens(&x, RASTER).unwrap().to_vec();
        let rev: Vec<f64> = tokens.chunks(3).rev().flatten().copied().collect();
        let b = &tom.branches[1];
        let out = b
            .forward(&Tensor::new(rev, &[1, 12, 3]).unwrap())
            .unwrap()
            .to_vec();
        let expected: Vec<f64> = out.chunks(3).rev().flatten().copied().collect();
        for (a, e) in y.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn branches_have_independent_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tom = Tom::new(small_config(4), &mut rng).unwrap();
        let names: Vec<String> = tom.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"forward.norm.gamma".to_string()));
        assert!(names.contains(&"inter_slice.mamba.a_log".to_string()));
        let ids: std::collections::HashSet<u64> = tom.parameters().iter().map(|t| t.id()).collect();
        assert_eq!(ids.len(), names.len());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let tom = Tom::new(small_config(2), &mut rng).unwrap();
            let x = rand_tensor(&[1, 2, 2, 2, 2], &mut rng);
            let r = random_projection(x.shape(), &mut rng).unwrap();
            let mut leaves = vec![x.clone()];
            leaves.extend(tom.parameters());
            let rep = check_gradients(
                || tom.forward(&x)?.mul(&r)?.sum(),
                &leaves,
                1e-5,
                Some(20),
                &mut rng,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "seed {seed}: {rep:?}");
        }
    }
}
