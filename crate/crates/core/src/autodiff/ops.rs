#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;


use super::kernels::{self, to_s, ConvGeom};
use super::{Node, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient routes to the first maximal element in linear order.
    Max,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, f64),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    Reduce {
        x: Var,
        op: ReduceOp,
        axes: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// `x * scale[c] + shift[c]` along axis 1.
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    /// Normalize with batch statistics over every axis except 1.
    BatchNormalize {
        x: Var,
        eps: f64,
    },
    CwRelu(Var),
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
    },
    Bilinear {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Softmax(Var),
    LogSumExp(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | BatchMatMul(a, b) => vec![*a, *b],
            AddScalar(a, _) | Scale(a, _) | Exp(a) | Log(a) | Relu(a) | Reshape(a, _)
            | Permute(a, _) | CwRelu(a) | Softmax(a) | LogSumExp(a) => vec![*a],
            Reduce { x, .. }
            | BatchNormalize { x, .. }
            | L2Normalize { x, .. }
            | Bilinear { x, .. }
            | Narrow { x, .. } => vec![*x],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Concat { xs, .. } => xs.clone(),
        }
    }
}

fn val<S: Real>(nodes: &[Node<S>], v: Var) -> &Tensor<S> {
    &nodes[v.0].value
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::mismatch(op, a, b));
    }
    Ok(())
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    Ok(())
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::mismatch("conv2d", x, w));
    }
    if x[1] != w[1] {
        return Err(Error::mismatch("conv2d channels", x, w));
    }
    if stride == 0 {
        return Err(Error::arg("conv2d stride must be positive"));
    }
    let (h, wd) = (x[2] + 2 * pad, x[3] + 2 * pad);
    if w[2] > h || w[3] > wd {
        return Err(Error::mismatch("conv2d kernel larger than padded input", x, w));
    }
    Ok(ConvGeom {
        n: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        oh: (h - w[2]) / stride + 1,
        ow: (wd - w[3]) / stride + 1,
    })
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected [N, C, ...]",
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn zip_map<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn eval<S: Real>(op: &Op, nodes: &[Node<S>]) -> Result<Tensor<S>> {
    use Op::*;
    Ok(match op {
        Leaf => return Err(Error::arg("leaf nodes are not evaluated")),
        Add(a, b) | Sub(a, b) | Mul(a, b) => {
            let (a, b) = (val(nodes, *a), val(nodes, *b));
            same_shape("elementwise", a.shape(), b.shape())?;
            match op {
                Add(..) => zip_map(a, b, |x, y| x + y),
                Sub(..) => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            }
        }
        AddScalar(a, c) => {
            let c = S::from_f64(*c);
            val(nodes, *a).map(|x| x + c)
        }
        Scale(a, c) => {
            let c = S::from_f64(*c);
            val(nodes, *a).map(|x| x * c)
        }
        Exp(a) => val(nodes, *a).map(|x| x.exp()),
        Log(a) => {
            let t = val(nodes, *a);
            if let Some((index, v)) = t.data().iter().enumerate().find(|(_, v)| !(**v > S::zero())) {
                return Err(Error::LogDomain {
                    index,
                    value: v.as_f64(),
                });
            }
            t.map(|x| x.ln())
        }
        Relu(a) => val(nodes, *a).map(|x| if x > S::zero() { x } else { S::zero() }),
        MatMul(a, b) => {
            let (a, b) = (val(nodes, *a), val(nodes, *b));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], to_s(kernels::gemm(a.data(), false, b.data(), false, m, k, n)))
        }
        BatchMatMul(a, b) => {
            let (a, b) = (val(nodes, *a), val(nodes, *b));
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
                return Err(Error::mismatch("batch_matmul", a.shape(), b.shape()));
            }
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let mut out = Vec::with_capacity(bs * m * n);
            for i in 0..bs {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                out.extend(kernels::gemm(ai, false, bi, false, m, k, n).into_iter().map(S::from_f64));
            }
            Tensor::from_parts(vec![bs, m, n], out)
        }
        Reshape(a, shape) => {
            let t = val(nodes, *a);
            if numel(shape) != t.len() {
                return Err(Error::mismatch("reshape", t.shape(), shape));
            }
            Tensor::from_parts(shape.clone(), t.data().to_vec())
        }
        Permute(a, perm) => {
            let t = val(nodes, *a);
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || core::mem::replace(&mut seen[p], true)) {
                return Err(Error::arg("permute: not a permutation of the axes"));
            }
            let (shape, data) = kernels::permute(t.data(), t.shape(), perm);
            Tensor::from_parts(shape, data)
        }
        Reduce { x, op, axes } => {
            let t = val(nodes, *x);
            for &ax in axes {
                check_axis(ax, t.rank())?;
            }
            if axes.is_empty() {
                return Ok(t.clone());
            }
            let (out_shape, map) = kernels::reduce_index_map(t.shape(), axes);
            let out_n = numel(&out_shape);
            let count = (t.len() / out_n) as f64;
            match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let mut acc = vec![0.0f64; out_n];
                    for (v, &o) in t.data().iter().zip(&map) {
                        acc[o] += v.as_f64();
                    }
                    if *op == ReduceOp::Mean {
                        acc.iter_mut().for_each(|a| *a /= count);
                    }
                    Tensor::from_parts(out_shape, to_s(acc))
                }
                ReduceOp::Max => {
                    let mut best = vec![S::neg_infinity(); out_n];
                    let mut seen = vec![false; out_n];
                    for (&v, &o) in t.data().iter().zip(&map) {
                        if !seen[o] || v > best[o] {
                            best[o] = v;
                            seen[o] = true;
                        }
                    }
                    Tensor::from_parts(out_shape, best)
                }
            }
        }
        Conv2d { x, w, b, stride, pad } => {
            let (xt, wt) = (val(nodes, *x), val(nodes, *w));
            let g = conv_geom(xt.shape(), wt.shape(), *stride, *pad)?;
            let bias = match b {
                Some(b) => {
                    let bt = val(nodes, *b);
                    if bt.shape() != [g.cout] {
                        return Err(Error::mismatch("conv2d bias", bt.shape(), &[g.cout]));
                    }
                    Some(bt.data())
                }
                None => None,
            };
            let out = kernels::conv_forward(xt.data(), wt.data(), bias, &g);
            Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out)
        }
        ChannelAffine { x, scale, shift } => {
            let t = val(nodes, *x);
            let (n, c, inner) = channel_layout(t.shape())?;
            let (sc, sh) = (val(nodes, *scale), val(nodes, *shift));
            if sc.shape() != [c] || sh.shape() != [c] {
                return Err(Error::mismatch("channel_affine", t.shape(), sc.shape()));
            }
            let mut out = Vec::with_capacity(t.len());
            for ni in 0..n {
                for ci in 0..c {
                    let (a, b) = (sc.data()[ci], sh.data()[ci]);
                    let off = (ni * c + ci) * inner;
                    out.extend(t.data()[off..off + inner].iter().map(|&v| v * a + b));
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        }
        BatchNormalize { x, eps } => {
            let t = val(nodes, *x);
            let (n, c, inner) = channel_layout(t.shape())?;
            let st = kernels::batch_stats(t.data(), n, c, inner);
            let inv: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = Vec::with_capacity(t.len());
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * inner;
                    out.extend(
                        t.data()[off..off + inner]
                            .iter()
                            .map(|v| S::from_f64((v.as_f64() - st.mean[ci]) * inv[ci])),
                    );
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        }
        CwRelu(a) => {
            let t = val(nodes, *a);
            if t.rank() != 4 {
                return Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: "cw_relu expects [N, C, H, W]",
                });
            }
            let hw = t.shape()[2] * t.shape()[3];
            let mut out = t.data().to_vec();
            for plane in out.chunks_mut(hw) {
                let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
                if mean < 0.0 {
                    plane.iter_mut().for_each(|v| *v = S::zero());
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        }
        L2Normalize { x, axis, eps } => {
            let t = val(nodes, *x);
            check_axis(*axis, t.rank())?;
            let (outer, dim, inner) = kernels::split_axis(t.shape(), *axis);
            let mut out = t.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let norm = (0..dim)
                        .map(|d| {
                            let v = t.data()[base + d * inner].as_f64();
                            v * v
                        })
                        .sum::<f64>()
                        .sqrt()
                        .max(*eps);
                    for d in 0..dim {
                        out[base + d * inner] = S::from_f64(t.data()[base + d * inner].as_f64() / norm);
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        }
        Bilinear { x, out_h, out_w } => {
            let t = val(nodes, *x);
            if t.rank() != 4 || *out_h == 0 || *out_w == 0 {
                return Err(Error::arg("bilinear_resize expects [N, C, H, W] and positive target size"));
            }
            let s = t.shape();
            let out = kernels::bilinear_forward(t.data(), s[0] * s[1], s[2], s[3], *out_h, *out_w);
            Tensor::from_parts(vec![s[0], s[1], *out_h, *out_w], out)
        }
        Softmax(a) | LogSumExp(a) => {
            let t = val(nodes, *a);
            if t.rank() == 0 {
                return Err(Error::arg("softmax/logsumexp need rank >= 1"));
            }
            let cols = *t.shape().last().unwrap();
            let rows = t.len() / cols;
            if matches!(op, Softmax(_)) {
                Tensor::from_parts(t.shape().to_vec(), to_s(kernels::softmax_rows(t.data(), rows, cols)))
            } else {
                let shape = t.shape()[..t.rank() - 1].to_vec();
                Tensor::from_parts(shape, to_s(kernels::logsumexp_rows(t.data(), rows, cols)))
            }
        }
        Narrow { x, axis, start, len } => {
            let t = val(nodes, *x);
            check_axis(*axis, t.rank())?;
            let (outer, dim, inner) = kernels::split_axis(t.shape(), *axis);
            if *len == 0 || start + len > dim {
                return Err(Error::arg("narrow: range out of bounds"));
            }
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let off = (o * dim + start) * inner;
                out.extend_from_slice(&t.data()[off..off + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Concat { xs, axis } => {
            let first = val(nodes, *xs.first().ok_or_else(|| Error::arg("concat of nothing"))?);
            check_axis(*axis, first.rank())?;
            let mut total = 0;
            for v in xs {
                let s = val(nodes, *v).shape();
                let ok = s.len() == first.rank()
                    && s.iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(Error::mismatch("concat", first.shape(), s));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = kernels::split_axis(first.shape(), *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in xs {
                    let t = val(nodes, *v);
                    let d = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, out)
        }
    })
}

/// Vector-Jacobian products of node `at` for upstream gradient `g`.
pub(crate) fn vjp<S: Real>(op: &Op, nodes: &[Node<S>], at: usize, g: &[S]) -> Result<Vec<(Var, Vec<S>)>> {
    use Op::*;
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let out = &nodes[at].value;
    let mut res: Vec<(Var, Vec<S>)> = Vec::new();
    match op {
        Leaf => {}
        Add(a, b) => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.to_vec()));
        }
        Sub(a, b) => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.iter().map(|&v| -v).collect()));
        }
        Mul(a, b) => {
            let (av, bv) = (val(nodes, *a).data(), val(nodes, *b).data());
            if needs(a) {
                res.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
            }
            if needs(b) {
                res.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
            }
        }
        AddScalar(a, _) => res.push((*a, g.to_vec())),
        Scale(a, c) => {
            let c = S::from_f64(*c);
            res.push((*a, g.iter().map(|&v| v * c).collect()));
        }
        Exp(a) => res.push((*a, g.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect())),
        Log(a) => {
            let x = val(nodes, *a).data();
            res.push((*a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect()));
        }
        Relu(a) => {
            let x = val(nodes, *a).data();
            res.push((
                *a,
                g.iter().zip(x).map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() }).collect(),
            ));
        }
        MatMul(a, b) => {
            let (at_, bt) = (val(nodes, *a), val(nodes, *b));
            let (m, k, n) = (at_.shape()[0], at_.shape()[1], bt.shape()[1]);
            if needs(a) {
                // g[m,n] * b^T[n,k]
                res.push((*a, to_s(kernels::gemm(g, false, bt.data(), true, m, n, k))));
            }
            if needs(b) {
                // a^T[k,m] * g[m,n]
                res.push((*b, to_s(kernels::gemm(at_.data(), true, g, false, k, m, n))));
            }
        }
        BatchMatMul(a, b) => {
            let (at_, bt) = (val(nodes, *a), val(nodes, *b));
            let (bs, m, k, n) = (at_.shape()[0], at_.shape()[1], at_.shape()[2], bt.shape()[2]);
            let mut ga = Vec::new();
            let mut gb = Vec::new();
            for i in 0..bs {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &at_.data()[i * m * k..(i + 1) * m * k];
                let bi = &bt.data()[i * k * n..(i + 1) * k * n];
                if needs(a) {
                    ga.extend(kernels::gemm(gi, false, bi, true, m, n, k).into_iter().map(S::from_f64));
                }
                if needs(b) {
                    gb.extend(kernels::gemm(ai, true, gi, false, k, m, n).into_iter().map(S::from_f64));
                }
            }
            if needs(a) {
                res.push((*a, ga));
            }
            if needs(b) {
                res.push((*b, gb));
            }
        }
        Reshape(a, _) => res.push((*a, g.to_vec())),
        Permute(a, perm) => {
            let inv = kernels::inverse_perm(perm);
            let (_, data) = kernels::permute(g, out.shape(), &inv);
            res.push((*a, data));
        }
        Reduce { x, op, axes } => {
            let t = val(nodes, *x);
            if axes.is_empty() {
                res.push((*x, g.to_vec()));
            } else {
                let (_, map) = kernels::reduce_index_map(t.shape(), axes);
                let count = S::from_f64((t.len() / out.len()) as f64);
                let gx = match op {
                    ReduceOp::Sum => map.iter().map(|&o| g[o]).collect(),
                    ReduceOp::Mean => map.iter().map(|&o| g[o] / count).collect(),
                    ReduceOp::Max => {
                        let mut gx = vec![S::zero(); t.len()];
                        let mut routed = vec![false; out.len()];
                        for (i, (&v, &o)) in t.data().iter().zip(&map).enumerate() {
                            if !routed[o] && v == out.data()[o] {
                                gx[i] = g[o];
                                routed[o] = true;
                            }
                        }
                        gx
                    }
                };
                res.push((*x, gx));
            }
        }
        Conv2d { x, w, b, stride, pad } => {
            let (xt, wt) = (val(nodes, *x), val(nodes, *w));
            let geom = conv_geom(xt.shape(), wt.shape(), *stride, *pad)?;
            let need_b = b.map_or(false, |b| needs(&b));
            let (dx, dw, db) = kernels::conv_backward(xt.data(), wt.data(), g, &geom, needs(x), needs(w), need_b);
            if let Some(dx) = dx {
                res.push((*x, dx));
            }
            if let Some(dw) = dw {
                res.push((*w, dw));
            }
            if let (Some(db), Some(b)) = (db, b) {
                res.push((*b, db));
            }
        }
        ChannelAffine { x, scale, shift } => {
            let t = val(nodes, *x);
            let (n, c, inner) = channel_layout(t.shape())?;
            let sc = val(nodes, *scale).data();
            if needs(x) {
                let mut gx = Vec::with_capacity(t.len());
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * inner;
                        gx.extend(g[off..off + inner].iter().map(|&v| v * sc[ci]));
                    }
                }
                res.push((*x, gx));
            }
            if needs(scale) || needs(shift) {
                let mut gs = vec![0.0f64; c];
                let mut gb = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * inner;
                        for j in off..off + inner {
                            gs[ci] += g[j].as_f64() * t.data()[j].as_f64();
                            gb[ci] += g[j].as_f64();
                        }
                    }
                }
                if needs(scale) {
                    res.push((*scale, to_s(gs)));
                }
                if needs(shift) {
                    res.push((*shift, to_s(gb)));
                }
            }
        }
        BatchNormalize { x, eps } => {
            let t = val(nodes, *x);
            let (n, c, inner) = channel_layout(t.shape())?;
            let st = kernels::batch_stats(t.data(), n, c, inner);
            let m = st.count as f64;
            let gf: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
            let yf: Vec<f64> = out.data().iter().map(|v| v.as_f64()).collect();
            let sum_g = kernels::channel_sums(&gf, n, c, inner);
            let gy: Vec<f64> = gf.iter().zip(&yf).map(|(a, b)| a * b).collect();
            let sum_gy = kernels::channel_sums(&gy, n, c, inner);
            let mut gx = Vec::with_capacity(t.len());
            for ni in 0..n {
                for ci in 0..c {
                    let inv = 1.0 / (st.var[ci] + eps).sqrt();
                    let off = (ni * c + ci) * inner;
                    for j in off..off + inner {
                        let v = inv * (gf[j] - sum_g[ci] / m - yf[j] * sum_gy[ci] / m);
                        gx.push(S::from_f64(v));
                    }
                }
            }
            res.push((*x, gx));
        }
        CwRelu(a) => {
            // The channel mask is piecewise constant in x.
            let hw = out.shape()[2] * out.shape()[3];
            let x = val(nodes, *a).data();
            let mut gx = g.to_vec();
            for (p, gp) in gx.chunks_mut(hw).enumerate() {
                let mean = x[p * hw..(p + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
                if mean < 0.0 {
                    gp.iter_mut().for_each(|v| *v = S::zero());
                }
            }
            res.push((*a, gx));
        }
        L2Normalize { x, axis, eps } => {
            let t = val(nodes, *x);
            let (outer, dim, inner) = kernels::split_axis(t.shape(), *axis);
            let mut gx = vec![S::zero(); t.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let idx = |d: usize| base + d * inner;
                    let norm = (0..dim)
                        .map(|d| t.data()[idx(d)].as_f64().powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if norm > *eps {
                        let y: Vec<f64> = (0..dim).map(|d| t.data()[idx(d)].as_f64() / norm).collect();
                        let dot: f64 = (0..dim).map(|d| y[d] * g[idx(d)].as_f64()).sum();
                        for d in 0..dim {
                            gx[idx(d)] = S::from_f64((g[idx(d)].as_f64() - y[d] * dot) / norm);
                        }
                    } else {
                        for d in 0..dim {
                            gx[idx(d)] = S::from_f64(g[idx(d)].as_f64() / eps);
                        }
                    }
                }
            }
            res.push((*x, gx));
        }
        Bilinear { x, out_h, out_w } => {
            let s = val(nodes, *x).shape();
            res.push((*x, kernels::bilinear_backward(g, s[0] * s[1], s[2], s[3], *out_h, *out_w)));
        }
        Softmax(a) => {
            let cols = *out.shape().last().unwrap();
            let y = out.data();
            let mut gx = Vec::with_capacity(y.len());
            for r in 0..y.len() / cols {
                let row = r * cols..(r + 1) * cols;
                let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                gx.extend(row.map(|j| S::from_f64(y[j].as_f64() * (g[j].as_f64() - dot))));
            }
            res.push((*a, gx));
        }
        LogSumExp(a) => {
            let t = val(nodes, *a);
            let cols = *t.shape().last().unwrap();
            let rows = t.len() / cols;
            let sm = kernels::softmax_rows(t.data(), rows, cols);
            let gx = (0..rows * cols).map(|j| S::from_f64(sm[j] * g[j / cols].as_f64())).collect();
            res.push((*a, gx));
        }
        Narrow { x, axis, start, len } => {
            let t = val(nodes, *x);
            let (outer, dim, inner) = kernels::split_axis(t.shape(), *axis);
            let mut gx = vec![S::zero(); t.len()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            res.push((*x, gx));
        }
        Concat { xs, axis } => {
            let first = val(nodes, xs[0]);
            let (outer, _, inner) = kernels::split_axis(first.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for v in xs {
                let d = val(nodes, *v).shape()[*axis];
                if needs(v) {
                    let mut gx = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[src..src + d * inner]);
                    }
                    res.push((*v, gx));
                }
                offset += d;
            }
        }
    }
    Ok(res)
}

impl<S: Real> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_op(Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push_op(Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push_op(Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push_op(Op::Exp(a))
    }

    /// Natural log; any non-positive element is an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push_op(Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push_op(Op::Relu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_op(Op::MatMul(a, b))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push_op(Op::BatchMatMul(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push_op(Op::Reshape(a, shape.to_vec()))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.push_op(Op::Permute(a, perm.to_vec()))
    }

    /// Reduce over `axes`, removing them. An empty axis set copies the input.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        self.push_op(Op::Reduce { x, op, axes })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Mean, x, &axes)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.push_op(Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.push_op(Op::ChannelAffine { x, scale, shift })
    }

    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push_op(Op::BatchNormalize { x, eps })
    }

    pub fn cw_relu(&mut self, x: Var) -> Result<Var> {
        self.push_op(Op::CwRelu(x))
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.push_op(Op::L2Normalize { x, axis, eps })
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.push_op(Op::Bilinear { x, out_h, out_w })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push_op(Op::Softmax(x))
    }

    /// Log-sum-exp over the last axis, which is removed.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.push_op(Op::LogSumExp(x))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push_op(Op::Narrow { x, axis, start, len })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.push_op(Op::Concat { xs: xs.to_vec(), axis })
    }
}
