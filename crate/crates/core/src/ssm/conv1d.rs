use crate::counter;
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

/// Depthwise causal convolution along the sequence axis of `x: [B, L, C]`
/// with `weight: [C, K]` and `bias: [C]`. Output step `t` sees inputs
/// `t−K+1 ..= t` (zero-padded on the left); tap `K−1` multiplies `x_t`.
pub fn causal_depthwise_conv1d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "causal_conv1d";
    let (batch, len, ch, k) = match (x.shape(), weight.shape()) {
        (&[b, l, c], &[wc, k]) if wc == c && bias.shape() == [c] => (b, l, c, k),
        _ => {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };
    counter::record((batch * len * ch * k) as u64);
    let (wv, bv) = (weight.to_vec(), bias.to_vec());
    let mut out = vec![0.0; batch * len * ch];
    {
        let xd = x.data();
        let xd = xd.as_slice();
        for_each_chunk_mut(&mut out, len * ch, |b, slab| {
            let xs = &xd[b * len * ch..(b + 1) * len * ch];
            for t in 0..len {
                let row = &mut slab[t * ch..(t + 1) * ch];
                row.copy_from_slice(&bv);
                for j in 0..k {
                    // tap j reads x_{t − (k−1−j)}
                    let Some(src) = (t + j + 1).checked_sub(k) else {
                        continue;
                    };
                    let xr = &xs[src * ch..(src + 1) * ch];
                    for c in 0..ch {
                        row[c] += wv[c * k + j] * xr[c];
                    }
                }
            }
        });
    }
    let xt = x.clone();
    Tensor::from_op(
        OP,
        out,
        vec![batch, len, ch],
        &[x, weight, bias],
        Box::new(move |g, _, needs| {
            let xd = xt.data();
            let mut gx = vec![0.0; batch * len * ch];
            if needs[0] {
                for_each_chunk_mut(&mut gx, len * ch, |b, slab| {
                    let gs = &g[b * len * ch..(b + 1) * len * ch];
                    for t in 0..len {
                        for j in 0..k {
                            let Some(src) = (t + j + 1).checked_sub(k) else {
                                continue;
                            };
                            for c in 0..ch {
                                slab[src * ch + c] += wv[c * k + j] * gs[t * ch + c];
                            }
                        }
                    }
                });
            }
            let mut gw = vec![0.0; ch * k];
            let mut gb = vec![0.0; ch];
            for b in 0..batch {
                for t in 0..len {
                    let gr = &g[(b * len + t) * ch..(b * len + t + 1) * ch];
                    for c in 0..ch {
                        gb[c] += gr[c];
                    }
                    for j in 0..k {
                        let Some(src) = (t + j + 1).checked_sub(k) else {
                            continue;
                        };
                        let xr = &xd[(b * len + src) * ch..(b * len + src + 1) * ch];
                        for c in 0..ch {
                            gw[c * k + j] += gr[c] * xr[c];
                        }
                    }
                }
            }
            vec![
                needs[0].then_some(gx),
                needs[1].then_some(gw),
                needs[2].then_some(gb),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn last_tap_is_current_step() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 3, 1]).unwrap();
        let w = Tensor::new(vec![0.0, 10.0, 1.0], &[1, 3]).unwrap();
        let b = Tensor::new(vec![0.5], &[1]).unwrap();
        let y = causal_depthwise_conv1d(&x, &w, &b).unwrap().to_vec();
        assert_eq!(y, vec![1.5, 12.5, 23.5]);
    }

    #[test]
    fn output_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xv: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[2, 4],
        )
        .unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let y0 = causal_depthwise_conv1d(&Tensor::new(xv.clone(), &[1, 6, 2]).unwrap(), &w, &b)
            .unwrap()
            .to_vec();
        xv[8] += 1.0;
        let y1 = causal_depthwise_conv1d(&Tensor::new(xv, &[1, 6, 2]).unwrap(), &w, &b)
            .unwrap()
            .to_vec();
        assert_eq!(y0[..8], y1[..8]);
        assert_ne!(y0[8], y1[8]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = |s: &[usize]| {
                Tensor::param(
                    (0..s.iter().product())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                    s,
                )
                .unwrap()
            };
            let (x, w, b) = (p(&[2, 5, 3]), p(&[3, 4]), p(&[3]));
            let r = random_projection(&[2, 5, 3], &mut rng).unwrap();
            let leaves = [x.clone(), w.clone(), b.clone()];
            let rep = check_gradients(
                || causal_depthwise_conv1d(&x, &w, &b)?.mul(&r)?.sum(),
                &leaves,
                1e-5,
                None,
                &mut rng,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }
}
