use rand::Rng;

use super::cmmb::Cmmb;
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, upsample_trilinear, Conv3d, ConvSpec, MlpSkip, Module, Norm, ResidualBlock};
use crate::tensor::Tensor;

/// Convolution followed by normalization and ReLU.
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: Norm,
}

impl ConvNormAct {
    fn new<R: Rng>(spec: ConvSpec, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(ConvNormAct {
            norm: Norm::new(cfg.norm_spec(spec.out_channels))?,
            conv: Conv3d::new(spec, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)?.relu()
    }
}

impl Module for ConvNormAct {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

pub struct EncoderStage {
    /// Channel-preserving 3×3×3 refinement before downsampling (stages 2–4).
    pub refine: Option<ConvNormAct>,
    pub down: ConvNormAct,
    pub blocks: Vec<Cmmb>,
}

impl EncoderStage {
    /// Convolution specs of this stage's downsampling path, in order.
    pub fn conv_specs(stage: usize, cfg: &ModelConfig) -> Vec<ConvSpec> {
        let c = cfg.stage_channels;
        if stage == 0 {
            vec![ConvSpec::cubic(cfg.in_channels, c[0], 7, 2, 3)]
        } else {
            vec![
                ConvSpec::cubic(c[stage - 1], c[stage - 1], 3, 1, 1),
                ConvSpec::cubic(c[stage - 1], c[stage], 2, 2, 0),
            ]
        }
    }

    fn new<R: Rng>(stage: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut specs = Self::conv_specs(stage, cfg);
        let down = ConvNormAct::new(specs.pop().unwrap(), cfg, rng)?;
        let refine = specs
            .pop()
            .map(|s| ConvNormAct::new(s, cfg, rng))
            .transpose()?;
        let c = cfg.stage_channels[stage];
        let blocks = (0..cfg.cmmb_per_stage)
            .map(|_| Cmmb::new(c, cfg.mamba.tom(c), rng))
            .collect::<Result<_>>()?;
        Ok(EncoderStage {
            refine,
            down,
            blocks,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = match &self.refine {
            Some(r) => self.down.forward(&r.forward(x)?)?,
            None => self.down.forward(x)?,
        };
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

impl Module for EncoderStage {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(r) = &self.refine {
            r.visit_params(&join(prefix, "refine"), f);
        }
        self.down.visit_params(&join(prefix, "down"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("cmmb{i}")), f);
        }
    }
}

/// Skip features of stages 1–3 (after their MLP) and the stage-4 bottleneck.
pub struct EncoderOutputs {
    pub skips: [Tensor; 3],
    pub bottleneck: Tensor,
}

pub struct Encoder {
    pub stages: Vec<EncoderStage>,
    pub skip_mlps: Vec<MlpSkip>,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let stages = (0..4)
            .map(|k| EncoderStage::new(k, cfg, rng))
            .collect::<Result<_>>()?;
        let skip_mlps = (0..3)
            .map(|k| MlpSkip::new(cfg.stage_channels[k], &cfg.mlp_skip, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { stages, skip_mlps })
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderOutputs> {
        let f1 = self.stages[0].forward(x)?;
        let f2 = self.stages[1].forward(&f1)?;
        let f3 = self.stages[2].forward(&f2)?;
        let bottleneck = self.stages[3].forward(&f3)?;
        let skips = [
            self.skip_mlps[0].forward(&f1)?,
            self.skip_mlps[1].forward(&f2)?,
            self.skip_mlps[2].forward(&f3)?,
        ];
        Ok(EncoderOutputs { skips, bottleneck })
    }
}

impl Module for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (k, s) in self.stages.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{}", k + 1)), f);
        }
        for (k, m) in self.skip_mlps.iter().enumerate() {
            m.visit_params(&join(prefix, &format!("skip{}", k + 1)), f);
        }
    }
}

pub struct DecoderStage {
    pub proj: Conv3d,
    pub res: ResidualBlock,
}

pub struct Decoder {
    pub stages: Vec<DecoderStage>,
    pub head: Conv3d,
}

impl Decoder {
    pub fn head_spec(cfg: &ModelConfig) -> ConvSpec {
        ConvSpec::cubic_transposed(cfg.stage_channels[0], cfg.num_classes, 2, 2, 0, 0)
    }

    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut in_ch = cfg.stage_channels[3];
        let mut stages = Vec::with_capacity(3);
        for out_ch in cfg.decoder_channels() {
            let groups = cfg.norm_spec(out_ch).groups();
            stages.push(DecoderStage {
                proj: Conv3d::new(ConvSpec::cubic(in_ch, out_ch, 1, 1, 0), rng)?,
                res: ResidualBlock::new(out_ch, groups, cfg.residual_order, rng)?,
            });
            in_ch = out_ch;
        }
        Ok(Decoder {
            stages,
            head: Conv3d::new(Self::head_spec(cfg), rng)?,
        })
    }

    pub fn forward(&self, enc: &EncoderOutputs) -> Result<Tensor> {
        let mut h = enc.bottleneck.clone();
        for (stage, skip) in self.stages.iter().zip(enc.skips.iter().rev()) {
            let up = upsample_trilinear(&stage.proj.forward(&h)?, 2)?;
            if up.shape() != skip.shape() {
                return Err(Error::ShapeMismatch {
                    op: "decoder_skip",
                    lhs: up.shape().to_vec(),
                    rhs: skip.shape().to_vec(),
                });
            }
            h = stage.res.forward(&up.add(skip)?)?;
        }
        self.head.forward(&h)
    }
}

impl Module for Decoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (k, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", k + 1));
            s.proj.visit_params(&join(&p, "proj"), f);
            s.res.visit_params(&join(&p, "res"), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

pub struct SegResMamba {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SegResMamba {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(SegResMamba {
            encoder: Encoder::new(&config, rng)?,
            decoder: Decoder::new(&config, rng)?,
            config,
        })
    }

    /// `x: [N, in_channels, D, H, W]` → logits `[N, num_classes, D, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "segresmamba",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.in_channels, 0, 0, 0],
            });
        }
        self.config.validate_extents([s[2], s[3], s[4]])?;
        self.decoder.forward(&self.encoder.forward(x)?)
    }

    /// Sets every bias vector to zero.
    pub fn zero_biases(&self) {
        for (name, t) in self.named_parameters() {
            if name.ends_with("bias") {
                t.update_data(|d| d.fill(0.0));
            }
        }
    }
}

impl Module for SegResMamba {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_directional, random_projection};
    use crate::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::reduced([4, 8, 16, 32], 2);
        cfg.in_channels = 2;
        cfg.mamba.d_state = 2;
        cfg
    }

    fn rand_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            (0..shape.iter().product())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            shape,
        )
        .unwrap()
    }

    #[test]
    fn encoder_stage_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny_config();
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let out = no_grad(|| enc.forward(&rand_input(&[1, 2, 32, 64, 32], &mut rng))).unwrap();
        for (k, s) in out.skips.iter().enumerate() {
            let f = 2 << k;
            assert_eq!(
                s.shape(),
                &[1, cfg.stage_channels[k], 32 / f, 64 / f, 32 / f]
            );
        }
        assert_eq!(out.bottleneck.shape(), &[1, 32, 2, 4, 2]);
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_features_and_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SegResMamba::new(tiny_config(), &mut rng).unwrap();
        model.zero_biases();
        let x = Tensor::zeros(&[1, 2, 32, 32, 32]).unwrap();
        let enc = no_grad(|| model.encoder.forward(&x)).unwrap();
        for s in enc.skips.iter().chain([&enc.bottleneck]) {
            assert!(s.to_vec().iter().all(|&v| v == 0.0));
        }
        let y = no_grad(|| model.decoder.forward(&enc)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32, 32]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = SegResMamba::new(tiny_config(), &mut rng).unwrap();
        let x = rand_input(&[1, 2, 32, 32, 32], &mut rng);
        let a = no_grad(|| model.forward(&x)).unwrap().to_vec();
        let b = no_grad(|| model.forward(&x)).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SegResMamba::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = SegResMamba::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (pa, pb) = (a.named_parameters(), b.named_parameters());
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SegResMamba::new(tiny_config(), &mut rng).unwrap();
        assert!(model
            .forward(&Tensor::zeros(&[1, 3, 32, 32, 32]).unwrap())
            .is_err());
        assert!(model
            .forward(&Tensor::zeros(&[1, 2, 32, 16, 32]).unwrap())
            .is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = SegResMamba::new(tiny_config(), &mut rng).unwrap();
        let names: Vec<String> = model
            .named_parameters()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"encoder.stage1.down.conv.weight".to_string()));
        assert!(names.contains(&"encoder.stage2.refine.norm.gamma".to_string()));
        assert!(names.contains(&"decoder.head.bias".to_string()));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Single coordinates of a loss over 10⁵ voxels sit near its round-off
        // floor at h = 1e-5, so the whole network is checked along random
        // directions through all parameters and the input at once.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = SegResMamba::new(tiny_config(), &mut rng).unwrap();
        let x = Tensor::param(
            rand_input(&[1, 2, 32, 32, 32], &mut rng).to_vec(),
            &[1, 2, 32, 32, 32],
        )
        .unwrap();
        let r = random_projection(&[1, 3, 32, 32, 32], &mut rng).unwrap();
        let mut leaves = vec![x.clone()];
        leaves.extend(model.parameters());
        let err = check_directional(
            || model.forward(&x)?.mul(&r)?.sum(),
            &leaves,
            1e-5,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:e}");
    }
}
