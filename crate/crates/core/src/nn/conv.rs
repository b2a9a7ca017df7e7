//! Direct 3D convolution and transposed convolution.
//!
//! Both ops reduce to three slab kernels over a pair of volumes related by
//! `long = short * stride + tap - pad` along each axis:
//! gather (`short += w * long`), scatter (`long += w * short`) and dot
//! (`Σ short * long`). Each output slab is owned by exactly one task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init, Module};
use crate::counter;
use crate::error::{invalid, Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub transposed: bool,
    pub output_padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Cubic forward convolution.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [s; 3],
            padding: [p; 3],
            transposed: false,
            output_padding: [0; 3],
            groups: 1,
        }
    }

    /// Cubic transposed convolution.
    pub fn cubic_transposed(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        s: usize,
        p: usize,
        output_padding: usize,
    ) -> Self {
        ConvSpec {
            transposed: true,
            output_padding: [output_padding; 3],
            ..Self::cubic(in_channels, out_channels, k, s, p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels >= 1
            && self.out_channels >= 1
            && self.groups >= 1
            && self.kernel.iter().chain(&self.stride).all(|&v| v >= 1);
        if !positive {
            return Err(invalid(
                "conv_spec",
                format!("non-positive extent in {self:?}"),
            ));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(invalid(
                "conv_spec",
                format!(
                    "channels {}→{} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        if !self.transposed && self.output_padding != [0; 3] {
            return Err(invalid(
                "conv_spec",
                "output_padding requires a transposed conv",
            ));
        }
        if self.transposed && (0..3).any(|a| self.output_padding[a] >= self.stride[a]) {
            return Err(invalid(
                "conv_spec",
                "output_padding must be smaller than stride",
            ));
        }
        Ok(())
    }

    /// Spatial output extents for the given input extents.
    pub fn out_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let (i, k, s, p) = (
                input[a] as isize,
                self.kernel[a] as isize,
                self.stride[a] as isize,
                self.padding[a] as isize,
            );
            let o = if self.transposed {
                (i - 1) * s - 2 * p + k + self.output_padding[a] as isize
            } else {
                let span = i + 2 * p - k;
                if span < 0 {
                    0
                } else {
                    span / s + 1
                }
            };
            if input[a] == 0 || o < 1 {
                return Err(invalid(
                    "conv3d",
                    format!("input extents {input:?} give empty output for {self:?}"),
                ));
            }
            out[a] = o as usize;
        }
        Ok(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `[C_out, C_in/groups, k…]` for forward convs, `[C_in, C_out/groups, k…]`
    /// for transposed ones.
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        if self.transposed {
            [
                self.in_channels,
                self.out_channels / self.groups,
                kd,
                kh,
                kw,
            ]
        } else {
            [
                self.out_channels,
                self.in_channels / self.groups,
                kd,
                kh,
                kw,
            ]
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    /// Multiply-accumulates for one sample with the given input extents.
    pub fn macs(&self, input: [usize; 3]) -> Result<u64> {
        let out = self.out_extents(input)?;
        let per_pos =
            (self.kernel_volume() * self.in_channels * self.out_channels / self.groups) as u64;
        let positions: usize = if self.transposed {
            input.iter().product()
        } else {
            out.iter().product()
        };
        Ok(positions as u64 * per_pos)
    }
}

/// Axis geometry between a "short" volume indexed directly and a "long" volume
/// indexed as `short * stride + tap - pad`.
#[derive(Clone, Copy)]
struct Pairing {
    short: [usize; 3],
    long: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

fn valid_range(short: usize, long: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let top = long as isize - 1 + p as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = short.min(top as usize / s + 1);
    (lo.min(hi), hi)
}

impl Pairing {
    /// Calls `f(short_start, long_start, count)` for every row pair valid under
    /// kernel tap `tap`; within a row, short index `short_start + j` pairs with
    /// long index `long_start + j * stride[2]`.
    #[inline]
    fn rows(&self, tap: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let [sd, sh, sw] = self.short;
        let [ld, lh, lw] = self.long;
        let (d0, d1) = valid_range(sd, ld, self.stride[0], self.pad[0], tap[0]);
        let (h0, h1) = valid_range(sh, lh, self.stride[1], self.pad[1], tap[1]);
        let (w0, w1) = valid_range(sw, lw, self.stride[2], self.pad[2], tap[2]);
        if w0 >= w1 {
            return;
        }
        let lw0 = w0 * self.stride[2] + tap[2] - self.pad[2];
        for d in d0..d1 {
            let ldi = d * self.stride[0] + tap[0] - self.pad[0];
            for h in h0..h1 {
                let lhi = h * self.stride[1] + tap[1] - self.pad[1];
                f((d * sh + h) * sw + w0, (ldi * lh + lhi) * lw + lw0, w1 - w0);
            }
        }
    }
}

#[inline]
fn taps(kernel: [usize; 3]) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [kd, kh, kw] = kernel;
    (0..kd * kh * kw).map(move |t| (t, [t / (kh * kw), (t / kw) % kh, t % kw]))
}

#[inline]
fn gather(p: &Pairing, tap: [usize; 3], w: f64, short: &mut [f64], long: &[f64]) {
    let s = p.stride[2];
    p.rows(tap, |si, li, n| {
        let dst = &mut short[si..si + n];
        if s == 1 {
            dst.iter_mut()
                .zip(&long[li..li + n])
                .for_each(|(d, x)| *d += w * x);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += w * long[li + j * s];
            }
        }
    });
}

#[inline]
fn scatter(p: &Pairing, tap: [usize; 3], w: f64, short: &[f64], long: &mut [f64]) {
    let s = p.stride[2];
    p.rows(tap, |si, li, n| {
        let src = &short[si..si + n];
        if s == 1 {
            long[li..li + n]
                .iter_mut()
                .zip(src)
                .for_each(|(d, x)| *d += w * x);
        } else {
            for (j, x) in src.iter().enumerate() {
                long[li + j * s] += w * x;
            }
        }
    });
}

#[inline]
fn dot(p: &Pairing, tap: [usize; 3], short: &[f64], long: &[f64]) -> f64 {
    let s = p.stride[2];
    let mut acc = 0.0;
    p.rows(tap, |si, li, n| {
        let a = &short[si..si + n];
        acc += if s == 1 {
            a.iter()
                .zip(&long[li..li + n])
                .map(|(x, y)| x * y)
                .sum::<f64>()
        } else {
            a.iter()
                .enumerate()
                .map(|(j, x)| x * long[li + j * s])
                .sum::<f64>()
        };
    });
    acc
}

fn check_input(
    op: &'static str,
    x: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<[usize; 3]> {
    spec.validate()?;
    let s = x.shape();
    if s.len() != 5 || s[1] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, spec.in_channels, 0, 0, 0],
        });
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: weight.shape().to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: b.shape().to_vec(),
                rhs: vec![spec.out_channels],
            });
        }
    }
    spec.out_extents([s[2], s[3], s[4]])
}

fn bias_grad(g: &[f64], batch: usize, channels: usize, vol: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            (0..batch)
                .map(|n| {
                    g[(n * channels + c) * vol..(n * channels + c + 1) * vol]
                        .iter()
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Forward 3D convolution of `x: [N, C_in, D, H, W]`.
pub fn conv3d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    if spec.transposed {
        return Err(invalid(
            "conv3d",
            "spec is transposed; use conv_transpose3d",
        ));
    }
    let out_ext = check_input("conv3d", x, spec, weight, bias)?;
    let (n, cin, cout, groups) = (
        x.shape()[0],
        spec.in_channels,
        spec.out_channels,
        spec.groups,
    );
    let in_ext = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let (in_vol, out_vol, kvol) = (
        in_ext.iter().product::<usize>(),
        out_ext.iter().product::<usize>(),
        spec.kernel_volume(),
    );
    let pair = Pairing {
        short: out_ext,
        long: in_ext,
        stride: spec.stride,
        pad: spec.padding,
    };
    counter::record(n as u64 * spec.macs(in_ext)?);

    let mut out = vec![0.0; n * cout * out_vol];
    {
        let (xd, wd) = (x.data(), weight.data());
        let (xd, wd) = (xd.as_slice(), wd.as_slice());
        let bd = bias.map(|b| b.to_vec());
        for_each_chunk_mut(&mut out, out_vol, |slab_idx, slab| {
            let (b, co) = (slab_idx / cout, slab_idx % cout);
            if let Some(bd) = &bd {
                slab.fill(bd[co]);
            }
            let grp = co / cout_g;
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xin = &xd[(b * cin + ci) * in_vol..(b * cin + ci + 1) * in_vol];
                let wbase = (co * cin_g + cil) * kvol;
                for (t, tap) in taps(spec.kernel) {
                    let w = wd[wbase + t];
                    if w != 0.0 {
                        gather(&pair, tap, w, slab, xin);
                    }
                }
            }
        });
    }

    let (xt, wt, spec) = (x.clone(), weight.clone(), *spec);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Tensor::from_op(
        "conv3d",
        out,
        vec![n, cout, out_ext[0], out_ext[1], out_ext[2]],
        &inputs,
        Box::new(move |g, _, needs| {
            let (xd, wd) = (xt.data(), wt.data());
            let (xd, wd) = (xd.as_slice(), wd.as_slice());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n * cin * in_vol];
                for_each_chunk_mut(&mut gx, in_vol, |slab_idx, slab| {
                    let (b, ci) = (slab_idx / cin, slab_idx % cin);
                    let (grp, cil) = (ci / cin_g, ci % cin_g);
                    for col in 0..cout_g {
                        let co = grp * cout_g + col;
                        let go = &g[(b * cout + co) * out_vol..(b * cout + co + 1) * out_vol];
                        let wbase = (co * cin_g + cil) * kvol;
                        for (t, tap) in taps(spec.kernel) {
                            let w = wd[wbase + t];
                            if w != 0.0 {
                                scatter(&pair, tap, w, go, slab);
                            }
                        }
                    }
                });
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; cout * cin_g * kvol];
                for_each_chunk_mut(&mut gw, cin_g * kvol, |co, gws| {
                    let grp = co / cout_g;
                    for b in 0..n {
                        let go = &g[(b * cout + co) * out_vol..(b * cout + co + 1) * out_vol];
                        for cil in 0..cin_g {
                            let ci = grp * cin_g + cil;
                            let xin = &xd[(b * cin + ci) * in_vol..(b * cin + ci + 1) * in_vol];
                            for (t, tap) in taps(spec.kernel) {
                                gws[cil * kvol + t] += dot(&pair, tap, go, xin);
                            }
                        }
                    }
                });
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, n, cout, out_vol)));
            }
            grads
        }),
    )
}

/// Transposed 3D convolution of `x: [N, C_in, D, H, W]` with weight
/// `[C_in, C_out/groups, k…]`.
pub fn conv_transpose3d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    if !spec.transposed {
        return Err(invalid(
            "conv_transpose3d",
            "spec is not transposed; use conv3d",
        ));
    }
    let out_ext = check_input("conv_transpose3d", x, spec, weight, bias)?;
    let (n, cin, cout, groups) = (
        x.shape()[0],
        spec.in_channels,
        spec.out_channels,
        spec.groups,
    );
    let in_ext = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let (in_vol, out_vol, kvol) = (
        in_ext.iter().product::<usize>(),
        out_ext.iter().product::<usize>(),
        spec.kernel_volume(),
    );
    let pair = Pairing {
        short: in_ext,
        long: out_ext,
        stride: spec.stride,
        pad: spec.padding,
    };
    counter::record(n as u64 * spec.macs(in_ext)?);

    let mut out = vec![0.0; n * cout * out_vol];
    {
        let (xd, wd) = (x.data(), weight.data());
        let (xd, wd) = (xd.as_slice(), wd.as_slice());
        let bd = bias.map(|b| b.to_vec());
        for_each_chunk_mut(&mut out, out_vol, |slab_idx, slab| {
            let (b, co) = (slab_idx / cout, slab_idx % cout);
            if let Some(bd) = &bd {
                slab.fill(bd[co]);
            }
            let (grp, col) = (co / cout_g, co % cout_g);
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xin = &xd[(b * cin + ci) * in_vol..(b * cin + ci + 1) * in_vol];
                let wbase = (ci * cout_g + col) * kvol;
                for (t, tap) in taps(spec.kernel) {
                    let w = wd[wbase + t];
                    if w != 0.0 {
                        scatter(&pair, tap, w, xin, slab);
                    }
                }
            }
        });
    }

    let (xt, wt, spec) = (x.clone(), weight.clone(), *spec);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Tensor::from_op(
        "conv_transpose3d",
        out,
        vec![n, cout, out_ext[0], out_ext[1], out_ext[2]],
        &inputs,
        Box::new(move |g, _, needs| {
            let (xd, wd) = (xt.data(), wt.data());
            let (xd, wd) = (xd.as_slice(), wd.as_slice());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n * cin * in_vol];
                for_each_chunk_mut(&mut gx, in_vol, |slab_idx, slab| {
                    let (b, ci) = (slab_idx / cin, slab_idx % cin);
                    let grp = ci / cin_g;
                    for col in 0..cout_g {
                        let co = grp * cout_g + col;
                        let go = &g[(b * cout + co) * out_vol..(b * cout + co + 1) * out_vol];
                        let wbase = (ci * cout_g + col) * kvol;
                        for (t, tap) in taps(spec.kernel) {
                            let w = wd[wbase + t];
                            if w != 0.0 {
                                gather(&pair, tap, w, slab, go);
                            }
                        }
                    }
                });
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; cin * cout_g * kvol];
                for_each_chunk_mut(&mut gw, cout_g * kvol, |ci, gws| {
                    let grp = ci / cin_g;
                    for b in 0..n {
                        let xin = &xd[(b * cin + ci) * in_vol..(b * cin + ci + 1) * in_vol];
                        for col in 0..cout_g {
                            let co = grp * cout_g + col;
                            let go = &g[(b * cout + co) * out_vol..(b * cout + co + 1) * out_vol];
                            for (t, tap) in taps(spec.kernel) {
                                gws[col * kvol + t] += dot(&pair, tap, xin, go);
                            }
                        }
                    }
                });
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, n, cout, out_vol)));
            }
            grads
        }),
    )
}

/// Convolution layer (forward or transposed) with a bias.
pub struct Conv3d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3d {
    /// Uniform `±1/√fan_in` initialization for weight and bias.
    pub fn new<R: Rng>(spec: ConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = ws[1] * spec.kernel_volume();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Conv3d {
            weight: init::uniform(&ws, bound, rng)?,
            bias: init::uniform(&[spec.out_channels], bound, rng)?,
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.spec.transposed {
            conv_transpose3d(x, &self.weight, Some(&self.bias), &self.spec)
        } else {
            conv3d(x, &self.weight, Some(&self.bias), &self.spec)
        }
    }
}

impl Module for Conv3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(super::join(prefix, "weight"), &self.weight);
        f(super::join(prefix, "bias"), &self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_projection};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::param((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Independent quadruple-loop reference with explicit bounds checks.
    fn naive_conv(
        x: &[f64],
        xs: [usize; 5],
        w: &[f64],
        b: &[f64],
        spec: &ConvSpec,
    ) -> (Vec<f64>, [usize; 5]) {
        let [n, cin, d, h, wd] = xs;
        let cout = spec.out_channels;
        let [kd, kh, kw] = spec.kernel;
        let o = spec.out_extents([d, h, wd]).unwrap();
        let cin_g = cin / spec.groups;
        let cout_g = cout / spec.groups;
        let mut out = vec![0.0; n * cout * o[0] * o[1] * o[2]];
        for bn in 0..n {
            for co in 0..cout {
                for od in 0..o[0] {
                    for oh in 0..o[1] {
                        for ow in 0..o[2] {
                            let mut acc = b[co];
                            for cil in 0..cin_g {
                                let ci = (co / cout_g) * cin_g + cil;
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let id = (od * spec.stride[0] + a) as isize
                                                - spec.padding[0] as isize;
                                            let ih = (oh * spec.stride[1] + bb) as isize
                                                - spec.padding[1] as isize;
                                            let iw = (ow * spec.stride[2] + c) as isize
                                                - spec.padding[2] as isize;
                                            if id < 0
                                                || ih < 0
                                                || iw < 0
                                                || id >= d as isize
                                                || ih >= h as isize
                                                || iw >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((bn * cin + ci) * d + id as usize) * h
                                                + ih as usize)
                                                * wd
                                                + iw as usize;
                                            let wi =
                                                (((co * cin_g + cil) * kd + a) * kh + bb) * kw + c;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((bn * cout + co) * o[0] + od) * o[1] + oh) * o[2] + ow] = acc;
                        }
                    }
                }
            }
        }
        (out, [n, cout, o[0], o[1], o[2]])
    }

    #[test]
    fn all_ones_sums_to_27() {
        let x = Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let y = conv3d(&x, &w, None, &ConvSpec::cubic(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![27.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 1, 4, 3, 5], &mut rng);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let w = Tensor::new(w, &[1, 1, 3, 3, 3]).unwrap();
        let y = conv3d(&x, &w, None, &ConvSpec::cubic(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn strided_conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec::cubic(2, 3, 3, 2, 1);
        let x = rand_tensor(&[1, 2, 6, 6, 6], &mut rng);
        let w = rand_tensor(&spec.weight_shape(), &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let y = conv3d(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(&y.shape()[2..], &[3, 3, 3]);
        let (expected, shape) = naive_conv(
            &x.to_vec(),
            [1, 2, 6, 6, 6],
            &w.to_vec(),
            &b.to_vec(),
            &spec,
        );
        assert_eq!(y.shape(), shape);
        for (a, e) in y.to_vec().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn grouped_and_anisotropic_conv_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ConvSpec {
            in_channels: 4,
            out_channels: 6,
            kernel: [3, 2, 4],
            stride: [1, 2, 3],
            padding: [2, 0, 1],
            transposed: false,
            output_padding: [0; 3],
            groups: 2,
        };
        let x = rand_tensor(&[2, 4, 5, 6, 7], &mut rng);
        let w = rand_tensor(&spec.weight_shape(), &mut rng);
        let b = rand_tensor(&[6], &mut rng);
        let y = conv3d(&x, &w, Some(&b), &spec).unwrap();
        let (expected, shape) = naive_conv(
            &x.to_vec(),
            [2, 4, 5, 6, 7],
            &w.to_vec(),
            &b.to_vec(),
            &spec,
        );
        assert_eq!(y.shape(), shape);
        for (a, e) in y.to_vec().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_single_voxel_fills_block() {
        let x = Tensor::full(&[1, 1, 1, 1, 1], 2.5).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0).unwrap();
        let y =
            conv_transpose3d(&x, &w, None, &ConvSpec::cubic_transposed(1, 1, 2, 2, 0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.to_vec().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn transposed_extent_formula() {
        let spec = ConvSpec::cubic_transposed(1, 1, 5, 2, 2, 1);
        assert_eq!(spec.out_extents([4, 4, 4]).unwrap(), [8, 8, 8]);
    }

    #[test]
    fn input_gradient_equals_transposed_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (5, 2, 2)] {
            let spec = ConvSpec::cubic(2, 3, k, s, p);
            let x = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
            let w = rand_tensor(&spec.weight_shape(), &mut rng);
            let y = conv3d(&x, &w, None, &spec).unwrap();
            let gout = random_projection(y.shape(), &mut rng).unwrap();
            y.mul(&gout).unwrap().sum().unwrap().backward().unwrap();

            let op = (4 + 2 * p - k) % s;
            let tspec = ConvSpec::cubic_transposed(3, 2, k, s, p, op);
            let back = conv_transpose3d(&gout, &w.detach(), None, &tspec).unwrap();
            assert_eq!(back.shape(), x.shape());
            for (a, e) in x.grad().unwrap().iter().zip(back.to_vec()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for spec in [
                ConvSpec::cubic(2, 2, 3, 2, 1),
                ConvSpec::cubic_transposed(2, 2, 3, 2, 1, 1),
            ] {
                let x = rand_tensor(&[1, 2, 3, 3, 3], &mut rng);
                let w = rand_tensor(&spec.weight_shape(), &mut rng);
                let b = rand_tensor(&[2], &mut rng);
                let y = Conv3d {
                    spec,
                    weight: w.clone(),
                    bias: b.clone(),
                }
                .forward(&x)
                .unwrap();
                let r = random_projection(y.shape(), &mut rng).unwrap();
                let report = check_gradients(
                    || {
                        Conv3d {
                            spec,
                            weight: w.clone(),
                            bias: b.clone(),
                        }
                        .forward(&x)?
                        .mul(&r)?
                        .sum()
                    },
                    &[x.clone(), w.clone(), b.clone()],
                    1e-5,
                    Some(40),
                    &mut rng,
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-6, "{spec:?}: {report:?}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ConvSpec::cubic(3, 4, 3, 1, 0)
            .out_extents([2, 2, 2])
            .is_err());
        assert!(ConvSpec {
            groups: 2,
            ..ConvSpec::cubic(3, 4, 3, 1, 1)
        }
        .validate()
        .is_err());
        assert!(ConvSpec::cubic(1, 1, 0, 1, 0).validate().is_err());
        let x = Tensor::zeros(&[1, 2, 4, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap();
        assert!(conv3d(&x, &w, None, &ConvSpec::cubic(1, 1, 3, 1, 1)).is_err());
    }

    #[test]
    fn closed_form_counts() {
        let spec = ConvSpec::cubic(2, 4, 3, 1, 1);
        assert_eq!(spec.param_count(), 220);
        assert_eq!(spec.macs([8, 8, 8]).unwrap(), 110_592);
        assert_eq!(ConvSpec::cubic(768, 384, 1, 1, 0).param_count(), 295_296);
    }
}
