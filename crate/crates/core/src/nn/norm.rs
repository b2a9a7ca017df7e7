//! Group, instance and layer normalization with population variance.

use serde::{Deserialize, Serialize};

use super::{init, join, Module};
use crate::error::{invalid, Error, Result};
use crate::parallel::{for_each_chunk_mut, map_indices};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Group,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Ignored for instance norm (one group per channel).
    pub num_groups: usize,
    pub channels: usize,
    pub epsilon: f64,
    pub affine: bool,
}

impl NormSpec {
    pub fn group(channels: usize, num_groups: usize) -> Self {
        NormSpec {
            kind: NormKind::Group,
            num_groups,
            channels,
            epsilon: DEFAULT_EPS,
            affine: true,
        }
    }

    pub fn instance(channels: usize) -> Self {
        NormSpec {
            kind: NormKind::Instance,
            num_groups: channels,
            channels,
            epsilon: DEFAULT_EPS,
            affine: true,
        }
    }

    pub fn groups(&self) -> usize {
        match self.kind {
            NormKind::Group => self.num_groups,
            NormKind::Instance => self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups();
        if self.channels == 0 || g == 0 || !self.channels.is_multiple_of(g) {
            return Err(invalid(
                "normalize",
                format!("{} channels not divisible by {g} groups", self.channels),
            ));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(invalid("normalize", "epsilon must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        if self.affine {
            2 * self.channels
        } else {
            0
        }
    }
}

/// Normalizes contiguous slices of length `slice_len`; `channel(j)` maps a
/// position inside a slice (plus the slice index) to its affine parameter.
fn normalize_slices<F>(
    op: &'static str,
    x: &Tensor,
    slice_len: usize,
    eps: f64,
    affine: Option<(&Tensor, &Tensor)>,
    channel: F,
) -> Result<Tensor>
where
    F: Fn(usize, usize) -> usize + Send + Sync + Copy + 'static,
{
    let n = x.numel();
    let slices = n / slice_len;
    let mut xhat = vec![0.0; n];
    let rstd: Vec<f64> = {
        let xd = x.data();
        let xd = xd.as_slice();
        let stats = map_indices(slices, |s| {
            let src = &xd[s * slice_len..(s + 1) * slice_len];
            let mean = src.iter().sum::<f64>() / slice_len as f64;
            // one correction pass removes the summation error of the naive mean
            let mean = mean + src.iter().map(|v| v - mean).sum::<f64>() / slice_len as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / slice_len as f64;
            (mean, 1.0 / (var + eps).sqrt())
        });
        for_each_chunk_mut(&mut xhat, slice_len, |s, out| {
            let (mean, r) = stats[s];
            let src = &xd[s * slice_len..(s + 1) * slice_len];
            out.iter_mut()
                .zip(src)
                .for_each(|(o, v)| *o = (v - mean) * r);
        });
        stats.into_iter().map(|(_, r)| r).collect()
    };
    let out = match affine {
        Some((gamma, beta)) => {
            let (gd, bd) = (gamma.data(), beta.data());
            let mut y = xhat.clone();
            for (s, chunk) in y.chunks_mut(slice_len).enumerate() {
                for (j, v) in chunk.iter_mut().enumerate() {
                    let c = channel(s, j);
                    *v = *v * gd[c] + bd[c];
                }
            }
            y
        }
        None => xhat.clone(),
    };

    let gamma = affine.map(|(g, _)| g.clone());
    let n_channels = affine.map_or(0, |(g, _)| g.numel());
    let mut inputs = vec![x];
    if let Some((g, b)) = affine {
        inputs.push(g);
        inputs.push(b);
    }
    Tensor::from_op(
        op,
        out,
        x.shape().to_vec(),
        &inputs,
        Box::new(move |g, _, needs| {
            let gamma_d = gamma.as_ref().map(|t| t.to_vec());
            let gxhat: Vec<f64> = match &gamma_d {
                Some(gd) => g
                    .chunks(slice_len)
                    .enumerate()
                    .flat_map(|(s, chunk)| {
                        chunk
                            .iter()
                            .enumerate()
                            .map(move |(j, v)| v * gd[channel(s, j)])
                    })
                    .collect(),
                None => g.to_vec(),
            };
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n];
                for_each_chunk_mut(&mut gx, slice_len, |s, out| {
                    let gh = &gxhat[s * slice_len..(s + 1) * slice_len];
                    let xh = &xhat[s * slice_len..(s + 1) * slice_len];
                    let m1 = gh.iter().sum::<f64>() / slice_len as f64;
                    let m2 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / slice_len as f64;
                    for ((o, a), b) in out.iter_mut().zip(gh).zip(xh) {
                        *o = rstd[s] * (a - m1 - b * m2);
                    }
                });
                gx
            });
            let mut grads = vec![gx];
            if needs.len() > 1 {
                let mut ggamma = vec![0.0; n_channels];
                let mut gbeta = vec![0.0; n_channels];
                for (s, chunk) in g.chunks(slice_len).enumerate() {
                    for (j, v) in chunk.iter().enumerate() {
                        let c = channel(s, j);
                        ggamma[c] += v * xhat[s * slice_len + j];
                        gbeta[c] += v;
                    }
                }
                grads.push(needs[1].then_some(ggamma));
                grads.push(needs[2].then_some(gbeta));
            }
            grads
        }),
    )
}

/// Group or instance normalization of `x: [N, C, spatial…]`.
pub fn normalize(
    x: &Tensor,
    spec: &NormSpec,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> Result<Tensor> {
    spec.validate()?;
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != spec.channels {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            lhs: shape.to_vec(),
            rhs: vec![0, spec.channels],
        });
    }
    let affine = match (gamma, beta) {
        (Some(g), Some(b)) => {
            if g.shape() != [spec.channels] || b.shape() != [spec.channels] {
                return Err(invalid(
                    "normalize",
                    "affine parameters must have shape [C]",
                ));
            }
            Some((g, b))
        }
        (None, None) => None,
        _ => {
            return Err(invalid(
                "normalize",
                "gamma and beta must be given together",
            ))
        }
    };
    let spatial: usize = shape[2..].iter().product();
    let groups = spec.groups();
    let per_group = spec.channels / groups;
    let slice_len = per_group * spatial;
    normalize_slices(
        "normalize",
        x,
        slice_len,
        spec.epsilon,
        affine,
        move |s, j| (s % groups) * per_group + j / spatial,
    )
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    normalize_slices("layer_norm", x, c, eps, Some((gamma, beta)), |_, j| j)
}

/// Group/instance normalization layer with optional affine parameters.
pub struct Norm {
    pub spec: NormSpec,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl Norm {
    pub fn new(spec: NormSpec) -> Result<Self> {
        spec.validate()?;
        let (gamma, beta) = if spec.affine {
            (
                Some(init::constant(&[spec.channels], 1.0)?),
                Some(init::constant(&[spec.channels], 0.0)?),
            )
        } else {
            (None, None)
        };
        Ok(Norm { spec, gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        normalize(x, &self.spec, self.gamma.as_ref(), self.beta.as_ref())
    }
}

impl Module for Norm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
            f(join(prefix, "gamma"), g);
            f(join(prefix, "beta"), b);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(channels: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init::constant(&[channels], 1.0)?,
            beta: init::constant(&[channels], 0.0)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
            shape,
        )
        .unwrap()
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[1, 2, 2, 2, 2], 3.7).unwrap();
        let y = normalize(&x, &NormSpec::instance(2), None, None).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_slice_normalizes_to_unit() {
        let x = Tensor::new(vec![1.0, 3.0], &[1, 1, 2, 1, 1]).unwrap();
        let y = normalize(&x, &NormSpec::instance(1), None, None)
            .unwrap()
            .to_vec();
        let expected = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        assert!((y[0] + expected).abs() < 1e-15 && (y[1] - expected).abs() < 1e-15);
        assert!((y[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn group_norm_with_one_channel_per_group_is_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 4, 2, 2, 2], 1.0, &mut rng);
        let a = normalize(&x, &NormSpec::group(4, 4), None, None)
            .unwrap()
            .to_vec();
        let b = normalize(&x, &NormSpec::instance(4), None, None)
            .unwrap()
            .to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn slices_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 6, 3, 3, 3], 10.0, &mut rng);
        for spec in [NormSpec::group(6, 3), NormSpec::instance(6)] {
            let y = normalize(&x, &spec, None, None).unwrap().to_vec();
            let len = 6 / spec.groups() * 27;
            for s in y.chunks(len) {
                let mean = s.iter().sum::<f64>() / len as f64;
                let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        assert!(NormSpec::group(6, 4).validate().is_err());
        let x = Tensor::zeros(&[1, 6, 2, 2, 2]).unwrap();
        assert!(normalize(&x, &NormSpec::group(6, 4), None, None).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&[1, 4, 2, 2, 2], 1.0, &mut rng);
            let gamma = rand_tensor(&[4], 1.0, &mut rng);
            let beta = rand_tensor(&[4], 1.0, &mut rng);
            let r = random_projection(x.shape(), &mut rng).unwrap();
            for spec in [NormSpec::group(4, 2), NormSpec::instance(4)] {
                let rep = check_gradients(
                    || {
                        normalize(&x, &spec, Some(&gamma), Some(&beta))?
                            .mul(&r)?
                            .sum()
                    },
                    &[x.clone(), gamma.clone(), beta.clone()],
                    1e-5,
                    None,
                    &mut rng,
                )
                .unwrap();
                assert!(rep.max_rel_error < 1e-6, "{rep:?}");
            }
            let tokens = rand_tensor(&[5, 4], 1.0, &mut rng);
            let r = random_projection(&[5, 4], &mut rng).unwrap();
            let rep = check_gradients(
                || {
                    layer_norm(&tokens, &gamma, &beta, DEFAULT_EPS)?
                        .mul(&r)?
                        .sum()
                },
                &[tokens.clone(), gamma.clone(), beta.clone()],
                1e-5,
                None,
                &mut rng,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }
}
