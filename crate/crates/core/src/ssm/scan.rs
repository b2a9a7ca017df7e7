//! Selective state-space scan.
//!
//! Per channel `d` and state index `n`:
//!
//! ```text
//! Ā_t = exp(Δ_t[d] · A[d, n])
//! h_t = Ā_t · h_{t−1} + Δ_t[d] · B_t[n] · u_t[d]
//! y_t[d] = Σ_n C_t[n] · h_t[n] + D[d] · u_t[d]
//! ```
//!
//! The forward pass is blocked: each chunk of `chunk` steps is first scanned
//! from a zero state while tracking the running product of `Ā`, then chunk
//! boundary states are carried sequentially, then every in-chunk state is
//! fixed up as `h_t = P_t ⊙ h_in + h_local_t`.

use crate::counter;
use crate::error::{Error, Result};
use crate::parallel::map_indices;
use crate::tensor::{is_grad_enabled, Tensor};

pub const DEFAULT_SCAN_CHUNK: usize = 16;

/// Multiply-accumulates charged per (step, channel, state) element.
pub const SCAN_MACS_PER_ELEMENT: u64 = 6;

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
}

struct Column {
    y: Vec<f64>,
    /// `len × state` hidden states, kept only when a backward pass may follow.
    h: Option<Vec<f64>>,
}

/// u, Δ, A, B, C, D as flat slices.
type Inputs<'a> = (
    &'a [f64],
    &'a [f64],
    &'a [f64],
    &'a [f64],
    &'a [f64],
    &'a [f64],
);

fn scan_column(
    dims: Dims,
    b: usize,
    d: usize,
    chunk: usize,
    keep_states: bool,
    (u, delta, a, bm, cm, dskip): Inputs<'_>,
) -> Column {
    let Dims {
        len,
        channels,
        state,
        ..
    } = dims;
    let at = |t: usize| (b * len + t) * channels + d;
    let bc = |t: usize| (b * len + t) * state;
    let a_row = &a[d * state..(d + 1) * state];

    // phase 1: local scans from a zero state
    let mut prod = vec![0.0; len * state];
    let mut local = vec![0.0; len * state];
    for start in (0..len).step_by(chunk) {
        let end = (start + chunk).min(len);
        let mut p = vec![1.0; state];
        let mut hl = vec![0.0; state];
        for t in start..end {
            let (dt, ut) = (delta[at(t)], u[at(t)]);
            let bt = &bm[bc(t)..bc(t) + state];
            for n in 0..state {
                let abar = (dt * a_row[n]).exp();
                p[n] *= abar;
                hl[n] = abar * hl[n] + dt * bt[n] * ut;
            }
            prod[t * state..(t + 1) * state].copy_from_slice(&p);
            local[t * state..(t + 1) * state].copy_from_slice(&hl);
        }
    }

    // phase 2 + 3: carry chunk boundary states, fix up and read out
    let mut y = vec![0.0; len];
    let mut h_in = vec![0.0; state];
    let mut h_all = keep_states.then(|| vec![0.0; len * state]);
    for start in (0..len).step_by(chunk) {
        let end = (start + chunk).min(len);
        for t in start..end {
            let ct = &cm[bc(t)..bc(t) + state];
            let mut acc = 0.0;
            for n in 0..state {
                let h = prod[t * state + n] * h_in[n] + local[t * state + n];
                acc += ct[n] * h;
                if let Some(hs) = h_all.as_mut() {
                    hs[t * state + n] = h;
                }
            }
            y[t] = acc + dskip[d] * u[at(t)];
        }
        let last = end - 1;
        for n in 0..state {
            h_in[n] = prod[last * state + n] * h_in[n] + local[last * state + n];
        }
    }
    Column { y, h: h_all }
}

struct ColumnGrad {
    gu: Vec<f64>,
    gdelta: Vec<f64>,
    ga: Vec<f64>,
    gd: f64,
    gb: Vec<f64>,
    gc: Vec<f64>,
}

fn scan_column_backward(
    dims: Dims,
    b: usize,
    d: usize,
    g: &[f64],
    h: &[f64],
    (u, delta, a, bm, cm, dskip): Inputs<'_>,
) -> ColumnGrad {
    let Dims {
        len,
        channels,
        state,
        ..
    } = dims;
    let at = |t: usize| (b * len + t) * channels + d;
    let bc = |t: usize| (b * len + t) * state;
    let a_row = &a[d * state..(d + 1) * state];
    let mut out = ColumnGrad {
        gu: vec![0.0; len],
        gdelta: vec![0.0; len],
        ga: vec![0.0; state],
        gd: 0.0,
        gb: vec![0.0; len * state],
        gc: vec![0.0; len * state],
    };
    let mut gh = vec![0.0; state];
    for t in (0..len).rev() {
        let (gy, ut, dt) = (g[at(t)], u[at(t)], delta[at(t)]);
        let (bt, ct) = (&bm[bc(t)..bc(t) + state], &cm[bc(t)..bc(t) + state]);
        let ht = &h[t * state..(t + 1) * state];
        out.gd += gy * ut;
        let mut gu = gy * dskip[d];
        let mut gdt = 0.0;
        for n in 0..state {
            out.gc[t * state + n] = gy * ht[n];
            gh[n] += gy * ct[n];
            let abar = (dt * a_row[n]).exp();
            let hprev = if t > 0 { h[(t - 1) * state + n] } else { 0.0 };
            let gabar = gh[n] * hprev;
            gdt += gabar * abar * a_row[n] + gh[n] * bt[n] * ut;
            out.ga[n] += gabar * abar * dt;
            out.gb[t * state + n] = gh[n] * dt * ut;
            gu += gh[n] * dt * bt[n];
            gh[n] *= abar;
        }
        out.gu[t] = gu;
        out.gdelta[t] = gdt;
    }
    out
}

fn expect_shape(op: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// Runs the scan over `u, delta: [B, L, D]`, `a: [D, N]`, `b, c: [B, L, N]`,
/// `d: [D]`, returning `y: [B, L, D]`.
pub fn scan(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    const OP: &str = "selective_scan";
    let dims = match (u.shape(), a.shape()) {
        (&[batch, len, channels], &[ch, state]) if ch == channels => Dims {
            batch,
            len,
            channels,
            state,
        },
        _ => {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: u.shape().to_vec(),
                rhs: a.shape().to_vec(),
            })
        }
    };
    let Dims {
        batch,
        len,
        channels,
        state,
    } = dims;
    expect_shape(OP, delta, u.shape())?;
    expect_shape(OP, b, &[batch, len, state])?;
    expect_shape(OP, c, &[batch, len, state])?;
    expect_shape(OP, d, &[channels])?;
    let chunk = chunk.max(1);
    counter::record(SCAN_MACS_PER_ELEMENT * (batch * len * channels * state) as u64);

    let inputs = [u, delta, a, b, c, d];
    let keep_states = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let columns = {
        let bufs: Vec<_> = inputs.iter().map(|t| t.data()).collect();
        let refs = (
            bufs[0].as_slice(),
            bufs[1].as_slice(),
            bufs[2].as_slice(),
            bufs[3].as_slice(),
            bufs[4].as_slice(),
            bufs[5].as_slice(),
        );
        map_indices(batch * channels, |i| {
            scan_column(dims, i / channels, i % channels, chunk, keep_states, refs)
        })
    };

    let mut y = vec![0.0; batch * len * channels];
    for (i, col) in columns.iter().enumerate() {
        let (bi, di) = (i / channels, i % channels);
        for (t, v) in col.y.iter().enumerate() {
            y[(bi * len + t) * channels + di] = *v;
        }
    }
    for v in &y {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: OP });
        }
    }
    let states: Vec<Vec<f64>> = columns.into_iter().filter_map(|c| c.h).collect();
    let saved: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();

    Tensor::from_op(
        OP,
        y,
        vec![batch, len, channels],
        &inputs,
        Box::new(move |g, _, needs| {
            let bufs: Vec<_> = saved.iter().map(|t| t.data()).collect();
            let refs = (
                bufs[0].as_slice(),
                bufs[1].as_slice(),
                bufs[2].as_slice(),
                bufs[3].as_slice(),
                bufs[4].as_slice(),
                bufs[5].as_slice(),
            );
            let cols = map_indices(batch * channels, |i| {
                scan_column_backward(dims, i / channels, i % channels, g, &states[i], refs)
            });
            let mut gu = vec![0.0; batch * len * channels];
            let mut gdelta = vec![0.0; batch * len * channels];
            let mut ga = vec![0.0; channels * state];
            let mut gd = vec![0.0; channels];
            let mut gb = vec![0.0; batch * len * state];
            let mut gc = vec![0.0; batch * len * state];
            // fixed reduction order over (batch, channel)
            for (i, col) in cols.iter().enumerate() {
                let (bi, di) = (i / channels, i % channels);
                for t in 0..len {
                    gu[(bi * len + t) * channels + di] = col.gu[t];
                    gdelta[(bi * len + t) * channels + di] = col.gdelta[t];
                }
                ga[di * state..(di + 1) * state]
                    .iter_mut()
                    .zip(&col.ga)
                    .for_each(|(a, b)| *a += b);
                gd[di] += col.gd;
                let off = bi * len * state;
                gb[off..off + len * state]
                    .iter_mut()
                    .zip(&col.gb)
                    .for_each(|(a, b)| *a += b);
                gc[off..off + len * state]
                    .iter_mut()
                    .zip(&col.gc)
                    .for_each(|(a, b)| *a += b);
            }
            [gu, gdelta, ga, gb, gc, gd]
                .into_iter()
                .zip(needs)
                .map(|(g, &need)| need.then_some(g))
                .collect()
        }),
    )
}

/// Hidden states of the blocked forward as `[B, D, L, N]`, without recording.
pub fn hidden_states(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    chunk: usize,
) -> Result<Vec<f64>> {
    let (batch, len, channels) = match u.shape() {
        &[b, l, c] => (b, l, c),
        s => {
            return Err(crate::error::invalid(
                "selective_scan",
                format!("need [B, L, D], got {s:?}"),
            ))
        }
    };
    let state = a.shape().last().copied().unwrap_or(0);
    // validates shapes
    crate::no_grad(|| scan(u, delta, a, b, c, d, chunk))?;
    let dims = Dims {
        batch,
        len,
        channels,
        state,
    };
    let bufs: Vec<_> = [u, delta, a, b, c, d].iter().map(|t| t.data()).collect();
    let refs = (
        bufs[0].as_slice(),
        bufs[1].as_slice(),
        bufs[2].as_slice(),
        bufs[3].as_slice(),
        bufs[4].as_slice(),
        bufs[5].as_slice(),
    );
    let cols = map_indices(batch * channels, |i| {
        scan_column(dims, i / channels, i % channels, chunk.max(1), true, refs)
    });
    Ok(cols
        .into_iter()
        .flat_map(|c| c.h.unwrap_or_default())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Plain step-by-step recurrence.
    fn naive(
        u: &[f64],
        delta: &[f64],
        a: &[f64],
        b: &[f64],
        c: &[f64],
        d: &[f64],
        (bs, l, ch, n): (usize, usize, usize, usize),
    ) -> Vec<f64> {
        let mut y = vec![0.0; bs * l * ch];
        for bi in 0..bs {
            for di in 0..ch {
                let mut h = vec![0.0; n];
                for t in 0..l {
                    let i = (bi * l + t) * ch + di;
                    let mut acc = 0.0;
                    for k in 0..n {
                        h[k] = (delta[i] * a[di * n + k]).exp() * h[k]
                            + delta[i] * b[(bi * l + t) * n + k] * u[i];
                        acc += c[(bi * l + t) * n + k] * h[k];
                    }
                    y[i] = acc + d[di] * u[i];
                }
            }
        }
        y
    }

    #[test]
    fn zero_input_gives_zero() {
        let (bs, l, ch, n) = (1, 5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = |v: Vec<f64>, s: &[usize]| Tensor::new(v, s).unwrap();
        let y = scan(
            &t(vec![0.0; bs * l * ch], &[bs, l, ch]),
            &t(rand_vec(bs * l * ch, 0.1, 1.0, &mut rng), &[bs, l, ch]),
            &t(rand_vec(ch * n, -2.0, -0.1, &mut rng), &[ch, n]),
            &t(rand_vec(bs * l * n, -1.0, 1.0, &mut rng), &[bs, l, n]),
            &t(rand_vec(bs * l * n, -1.0, 1.0, &mut rng), &[bs, l, n]),
            &t(rand_vec(ch, -1.0, 1.0, &mut rng), &[ch]),
            DEFAULT_SCAN_CHUNK,
        )
        .unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_step_hand_recurrence() {
        // Δ = 1, A = ln 0.5 gives Ā = 0.5 and B̄ = Δ·B = 1
        let t = |v: Vec<f64>, s: &[usize]| Tensor::new(v, s).unwrap();
        let y = scan(
            &t(vec![1.0, 1.0], &[1, 2, 1]),
            &t(vec![1.0, 1.0], &[1, 2, 1]),
            &t(vec![0.5f64.ln()], &[1, 1]),
            &t(vec![1.0, 1.0], &[1, 2, 1]),
            &t(vec![1.0, 1.0], &[1, 2, 1]),
            &t(vec![0.0], &[1]),
            1,
        )
        .unwrap();
        let y = y.to_vec();
        assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn blocked_scan_matches_naive_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (bs, l, ch, n) = (2, 17, 3, 4);
        let u = rand_vec(bs * l * ch, -1.0, 1.0, &mut rng);
        let delta = rand_vec(bs * l * ch, 0.01, 1.0, &mut rng);
        let a = rand_vec(ch * n, -2.0, -0.05, &mut rng);
        let b = rand_vec(bs * l * n, -1.0, 1.0, &mut rng);
        let c = rand_vec(bs * l * n, -1.0, 1.0, &mut rng);
        let d = rand_vec(ch, -1.0, 1.0, &mut rng);
        let expected = naive(&u, &delta, &a, &b, &c, &d, (bs, l, ch, n));
        for chunk in [1, 4, 5, 16, 64] {
            let y = scan(
                &Tensor::new(u.clone(), &[bs, l, ch]).unwrap(),
                &Tensor::new(delta.clone(), &[bs, l, ch]).unwrap(),
                &Tensor::new(a.clone(), &[ch, n]).unwrap(),
                &Tensor::new(b.clone(), &[bs, l, n]).unwrap(),
                &Tensor::new(c.clone(), &[bs, l, n]).unwrap(),
                &Tensor::new(d.clone(), &[ch]).unwrap(),
                chunk,
            )
            .unwrap();
            for (x, e) in y.to_vec().iter().zip(&expected) {
                assert!((x - e).abs() <= 1e-12, "chunk {chunk}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, ch, n) = (5, 2, 2);
            let p = |v: Vec<f64>, s: &[usize]| Tensor::param(v, s).unwrap();
            let u = p(rand_vec(l * ch, -1.0, 1.0, &mut rng), &[1, l, ch]);
            let delta = p(rand_vec(l * ch, 0.1, 1.0, &mut rng), &[1, l, ch]);
            let a = p(rand_vec(ch * n, -1.5, -0.2, &mut rng), &[ch, n]);
            let b = p(rand_vec(l * n, -1.0, 1.0, &mut rng), &[1, l, n]);
            let c = p(rand_vec(l * n, -1.0, 1.0, &mut rng), &[1, l, n]);
            let d = p(rand_vec(ch, -1.0, 1.0, &mut rng), &[ch]);
            let r = random_projection(&[1, l, ch], &mut rng).unwrap();
            let leaves = [
                u.clone(),
                delta.clone(),
                a.clone(),
                b.clone(),
                c.clone(),
                d.clone(),
            ];
            let rep = check_gradients(
                || scan(&u, &delta, &a, &b, &c, &d, 2)?.mul(&r)?.sum(),
                &leaves,
                1e-5,
                None,
                &mut rng,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn constant_input_state_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, ch, n) = (64, 2, 3);
        let delta: Vec<f64> = rand_vec(ch, 0.05, 0.5, &mut rng)
            .into_iter()
            .cycle()
            .take(l * ch)
            .collect();
        let a = rand_vec(ch * n, -2.0, -0.2, &mut rng);
        for (i, &av) in a.iter().enumerate() {
            assert!((delta[i / n] * av).exp() < 1.0);
        }
        let bn: Vec<f64> = rand_vec(n, -1.0, 1.0, &mut rng)
            .into_iter()
            .cycle()
            .take(l * n)
            .collect();
        let t = |v: Vec<f64>, s: &[usize]| Tensor::new(v, s).unwrap();
        let h = hidden_states(
            &t(vec![0.7; l * ch], &[1, l, ch]),
            &t(delta, &[1, l, ch]),
            &t(a, &[ch, n]),
            &t(bn.clone(), &[1, l, n]),
            &t(bn, &[1, l, n]),
            &t(vec![0.0; ch], &[ch]),
            8,
        )
        .unwrap();
        for c in 0..ch {
            let hs = &h[c * l * n..(c + 1) * l * n];
            let step = |t: usize| -> f64 {
                (0..n)
                    .map(|k| (hs[t * n + k] - hs[(t - 1) * n + k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            for t in 4..l {
                assert!(
                    step(t) < step(t - 1) || step(t) < 1e-15,
                    "channel {c} step {t}"
                );
            }
        }
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let z = |s: &[usize]| Tensor::zeros(s).unwrap();
        assert!(scan(
            &z(&[1, 4, 2]),
            &z(&[1, 4, 2]),
            &z(&[3, 2]),
            &z(&[1, 4, 2]),
            &z(&[1, 4, 2]),
            &z(&[2]),
            4
        )
        .is_err());
        assert!(scan(
            &z(&[1, 4, 2]),
            &z(&[1, 4, 2]),
            &z(&[2, 2]),
            &z(&[1, 3, 2]),
            &z(&[1, 4, 2]),
            &z(&[2]),
            4
        )
        .is_err());
    }
}
