use super::{numel, Tensor};
use crate::error::{invalid, Error, Result};

/// Pointwise nonlinearities with registered derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    Neg,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Neg => "neg",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Neg => -1.0,
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let k = shape.iter().take_while(|&&e| e == 1).count();
    &shape[k..]
}

/// Broadcast is limited to leading axes: after dropping leading singleton
/// axes, one operand's shape must be a suffix of the other's. The output takes
/// the shape of the larger operand (ties go to the higher rank).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (sa, sb) = (strip_leading_ones(a), strip_leading_ones(b));
    if !(sa.ends_with(sb) || sb.ends_with(sa)) {
        return None;
    }
    if (numel(a), a.len()) >= (numel(b), b.len()) {
        Some(a.to_vec())
    } else {
        Some(b.to_vec())
    }
}

/// Sums `g` (length `n_out`) into a buffer of length `n` by folding repeats.
fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

/// Decomposes `shape` around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], order: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    while out.len() < n {
        for k in 0..inner_len {
            out.push(data[offset + k * inner_stride]);
        }
        // advance the multi-index over all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn flip_data(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..len {
            let src = (o * len + i) * inner;
            let dst = (o * len + (len - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

impl Tensor {
    pub fn unary(&self, kind: Unary) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|&x| kind.apply(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            kind.name(),
            out,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, y, _| {
                let x = input.data();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Unary::Relu)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.unary(Unary::Silu)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Unary::Softplus)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Unary::Exp)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Unary::Neg)
    }

    fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let shape =
            broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::ShapeMismatch {
                op: kind.name(),
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
        let n = numel(&shape);
        let (na, nb) = (self.numel(), other.numel());
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            (0..n)
                .map(|i| {
                    let (x, y) = (a[i % na], b[i % nb]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect()
        };
        let (lhs, rhs) = (self.clone(), other.clone());
        Tensor::from_op(
            kind.name(),
            out,
            shape,
            &[self, other],
            Box::new(move |g, _, needs| {
                let ga = needs[0].then(|| {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => {
                            let b = rhs.data();
                            g.iter().enumerate().map(|(i, g)| g * b[i % nb]).collect()
                        }
                        BinaryKind::Div => {
                            let b = rhs.data();
                            g.iter().enumerate().map(|(i, g)| g / b[i % nb]).collect()
                        }
                    };
                    reduce_broadcast(&full, na)
                });
                let gb = needs[1].then(|| {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|g| -g).collect(),
                        BinaryKind::Mul => {
                            let a = lhs.data();
                            g.iter().enumerate().map(|(i, g)| g * a[i % na]).collect()
                        }
                        BinaryKind::Div => {
                            let (a, b) = (lhs.data(), rhs.data());
                            g.iter()
                                .enumerate()
                                .map(|(i, g)| {
                                    let y = b[i % nb];
                                    -g * a[i % na] / (y * y)
                                })
                                .collect()
                        }
                    };
                    reduce_broadcast(&full, nb)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            "mul_scalar",
            out,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|g| g * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(
            "add_scalar",
            out,
            self.shape().to_vec(),
            &[self],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![1],
            &[self],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums over the last axis; a rank-1 input reduces to shape `[1]`.
    pub fn sum_last_axis(&self) -> Result<Tensor> {
        let shape = self.shape();
        let last = *shape.last().expect("rank >= 1");
        let rows = self.numel() / last;
        let out: Vec<f64> = self.data().chunks(last).map(|r| r.iter().sum()).collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        Tensor::from_op(
            "sum_last_axis",
            out,
            out_shape,
            &[self],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(rows * last);
                for &gr in g {
                    gx.extend(std::iter::repeat_n(gr, last));
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            &[self],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if order.len() != rank
            || order
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid(
                "permute",
                format!("{order:?} is not a permutation of {rank} axes"),
            ));
        }
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape()[a]).collect();
        let out = permute_data(&self.data(), self.shape(), order);
        let mut inverse = vec![0usize; rank];
        for (i, &a) in order.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Tensor::from_op(
            "permute",
            out,
            out_shape,
            &[self],
            Box::new(move |g, _, _| vec![Some(permute_data(g, &grad_shape, &inverse))]),
        )
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        check_axis("flip", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        let out = flip_data(&self.data(), &shape, axis);
        let grad_shape = shape.clone();
        Tensor::from_op(
            "flip",
            out,
            shape,
            &[self],
            Box::new(move |g, _, _| vec![Some(flip_data(g, &grad_shape, axis))]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > extent {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} out of extent {extent}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            "narrow",
            out,
            shape,
            &[self],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..len {
                        let e = (x[at(k)] - m).exp();
                        out[at(k)] = e;
                        z += e;
                    }
                    for k in 0..len {
                        out[at(k)] /= z;
                    }
                }
            }
        }
        Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
