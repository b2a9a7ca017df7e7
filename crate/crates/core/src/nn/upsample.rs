//! Non-trainable trilinear upsampling with align-corners sampling.

use crate::error::{invalid, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

/// For each output index: (lower source index, upper source index, weight of upper).
fn axis_table(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    (0..len_out)
        .map(|i| {
            if len_in == 1 || len_out == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64;
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Upsamples the spatial axes of `x: [N, C, D, H, W]` by an integer factor.
/// Output index `i` samples input coordinate `i·(L_in−1)/(L_out−1)`.
pub fn upsample_trilinear(x: &Tensor, scale: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 || scale == 0 {
        return Err(invalid(
            "upsample_trilinear",
            format!("need [N,C,D,H,W] and scale ≥ 1, got {s:?} ×{scale}"),
        ));
    }
    let (nc, ind, inh, inw) = (s[0] * s[1], s[2], s[3], s[4]);
    let (od, oh, ow) = (ind * scale, inh * scale, inw * scale);
    let (td, th, tw) = (
        axis_table(ind, od),
        axis_table(inh, oh),
        axis_table(inw, ow),
    );
    let (in_vol, out_vol) = (ind * inh * inw, od * oh * ow);

    let mut out = vec![0.0; nc * out_vol];
    {
        let xd = x.data();
        let xd = xd.as_slice();
        for_each_chunk_mut(&mut out, out_vol, |c, slab| {
            let src = &xd[c * in_vol..(c + 1) * in_vol];
            let at = |d: usize, h: usize, w: usize| src[(d * inh + h) * inw + w];
            for (i, &(d0, d1, fd)) in td.iter().enumerate() {
                for (j, &(h0, h1, fh)) in th.iter().enumerate() {
                    let row = &mut slab[(i * oh + j) * ow..(i * oh + j + 1) * ow];
                    for (v, &(w0, w1, fw)) in row.iter_mut().zip(&tw) {
                        let lo = (1.0 - fh) * ((1.0 - fw) * at(d0, h0, w0) + fw * at(d0, h0, w1))
                            + fh * ((1.0 - fw) * at(d0, h1, w0) + fw * at(d0, h1, w1));
                        let hi = (1.0 - fh) * ((1.0 - fw) * at(d1, h0, w0) + fw * at(d1, h0, w1))
                            + fh * ((1.0 - fw) * at(d1, h1, w0) + fw * at(d1, h1, w1));
                        *v = (1.0 - fd) * lo + fd * hi;
                    }
                }
            }
        });
    }

    Tensor::from_op(
        "upsample_trilinear",
        out,
        vec![s[0], s[1], od, oh, ow],
        &[x],
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; nc * in_vol];
            for_each_chunk_mut(&mut gx, in_vol, |c, slab| {
                let gs = &g[c * out_vol..(c + 1) * out_vol];
                for (i, &(d0, d1, fd)) in td.iter().enumerate() {
                    for (j, &(h0, h1, fh)) in th.iter().enumerate() {
                        for (k, &(w0, w1, fw)) in tw.iter().enumerate() {
                            let gv = gs[(i * oh + j) * ow + k];
                            for (d, wd) in [(d0, 1.0 - fd), (d1, fd)] {
                                for (h, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                                    let base = (d * inh + h) * inw;
                                    slab[base + w0] += gv * wd * wh * (1.0 - fw);
                                    slab[base + w1] += gv * wd * wh * fw;
                                }
                            }
                        }
                    }
                }
            });
            vec![Some(gx)]
        }),
    )
}
