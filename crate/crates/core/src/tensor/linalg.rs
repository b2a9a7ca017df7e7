use super::Tensor;
use crate::counter;
use crate::error::{Error, Result};
use crate::parallel::{for_each_chunk_mut, map_indices};

impl Tensor {
    /// Affine map over the last axis: `x[..., in] · weightᵀ + bias`, with
    /// `weight` stored `[out, in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (out_f, in_f) = match weight.shape() {
            &[o, i] => (o, i),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: self.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if *self.shape().last().unwrap() != in_f {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: vec![out_f],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / in_f;
        counter::record((rows * in_f * out_f) as u64);

        let mut out = vec![0.0; rows * out_f];
        {
            let (x, w) = (self.data(), weight.data());
            let bias_data = bias.map(|b| b.to_vec());
            let (x, w) = (x.as_slice(), w.as_slice());
            for_each_chunk_mut(&mut out, out_f, |r, yr| {
                let xr = &x[r * in_f..(r + 1) * in_f];
                for (o, y) in yr.iter_mut().enumerate() {
                    let wr = &w[o * in_f..(o + 1) * in_f];
                    let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    *y = dot + bias_data.as_ref().map_or(0.0, |b| b[o]);
                }
            });
        }

        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let (xt, wt) = (self.clone(), weight.clone());
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::from_op(
            "linear",
            out,
            shape,
            &inputs,
            Box::new(move |g, _, needs| {
                let (x, w) = (xt.data(), wt.data());
                let (x, w) = (x.as_slice(), w.as_slice());
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * in_f];
                    for_each_chunk_mut(&mut gx, in_f, |r, gxr| {
                        for o in 0..out_f {
                            let go = g[r * out_f + o];
                            if go != 0.0 {
                                let wr = &w[o * in_f..(o + 1) * in_f];
                                gxr.iter_mut().zip(wr).for_each(|(a, b)| *a += go * b);
                            }
                        }
                    });
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; out_f * in_f];
                    for_each_chunk_mut(&mut gw, in_f, |o, gwr| {
                        for r in 0..rows {
                            let go = g[r * out_f + o];
                            if go != 0.0 {
                                let xr = &x[r * in_f..(r + 1) * in_f];
                                gwr.iter_mut().zip(xr).for_each(|(a, b)| *a += go * b);
                            }
                        }
                    });
                    gw
                });
                let mut grads = vec![gx, gw];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        map_indices(out_f, |o| (0..rows).map(|r| g[r * out_f + o]).sum())
                    }));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::new(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let w = Tensor::new(vec![1., 0., 1., 1., 0., 2.], &[3, 2]).unwrap();
        let b = Tensor::new(vec![0.5, 0., -1.], &[3]).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![1.5, 3., 3., 3.5, 7., 7.]);
    }

    #[test]
    fn linear_counts_macs() {
        let x = Tensor::zeros(&[5, 4]).unwrap();
        let w = Tensor::zeros(&[3, 4]).unwrap();
        let (_, macs) = crate::counter::count_macs(|| x.linear(&w, None).unwrap());
        assert_eq!(macs, 5 * 4 * 3);
    }

    #[test]
    fn linear_rejects_bad_weight() {
        let x = Tensor::zeros(&[2, 4]).unwrap();
        let w = Tensor::zeros(&[3, 5]).unwrap();
        assert!(x.linear(&w, None).is_err());
    }
}
