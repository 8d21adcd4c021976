//! Differentiable operations.
//!
//! Shape rules, per op kind:
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]` | `[m,n]` / `[b,m,n]` |
//! | `add`, `sub`, `mul_elementwise` | `a`, `b` where `b.shape` is a trailing suffix of `a.shape` (broadcast over leading dims) | `a.shape` |
//! | `scale` | any, attr `Scale(c)` | same |
//! | `mean`, `sum` | any | `[1]` |
//! | `transpose` | rank ≥ 2, swaps the last two dims | |
//! | `reshape` | any, attr `Shape(s)` with equal element count | `s` |
//! | `concat` | ≥ 1 tensors equal except along attr `Axis(i)` | |
//! | `slice` | any, attr `Range { axis, start, end }` with `start < end ≤ dim` | |
//! | `softmax_lastdim`, `gelu`, `relu`, `l2_normalize_lastdim` | any | same |
//! | `layer_norm` | `x [..,d]`, `gamma [d]`, `beta [d]` | `x.shape` |
//! | `embedding_lookup` | table `[v,d]`, attr `Ids(ids)` with every id `< v` | `[len(ids), d]` |
//! | `l1_loss` | `pred`, `target` of equal shape | `[1]` |
//! | `cosine_rows` | `a`, `b` of equal shape `[n,d]` (or `[d]`) | `[n]` |
//! | `causal_attention` | `q`, `k`, `v` of equal shape `[b,t,d]`, attr `Heads(h)`, `d % h == 0` | `[b,t,d]` |
//!
//! `batch_norm` lives in [`crate::batchnorm`] because it carries running
//! statistics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TensorError};
use crate::kernels::{dot, gelu, gelu_grad, gemm};
use crate::tape::{grad_slot, numel, Tape, Tensor, TensorId};

/// Denominator guard for norms and variances.
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    MulElementwise,
    Scale,
    Mean,
    Sum,
    Transpose,
    Reshape,
    Concat,
    Slice,
    SoftmaxLastDim,
    LayerNorm,
    Gelu,
    Relu,
    EmbeddingLookup,
    L1Loss,
    L2NormalizeLastDim,
    CosineRows,
    CausalAttention,
    BatchNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::MulElementwise,
        OpKind::Scale,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::SoftmaxLastDim,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::EmbeddingLookup,
        OpKind::L1Loss,
        OpKind::L2NormalizeLastDim,
        OpKind::CosineRows,
        OpKind::CausalAttention,
        OpKind::BatchNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulElementwise => "mul_elementwise",
            OpKind::Scale => "scale",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::SoftmaxLastDim => "softmax_lastdim",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::L1Loss => "l1_loss",
            OpKind::L2NormalizeLastDim => "l2_normalize_lastdim",
            OpKind::CosineRows => "cosine_rows",
            OpKind::CausalAttention => "causal_attention",
            OpKind::BatchNorm => "batch_norm",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Op attributes for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs {
    None,
    Scale(f64),
    Shape(Vec<usize>),
    Axis(usize),
    Range { axis: usize, start: usize, end: usize },
    Ids(Vec<usize>),
    Heads(usize),
}

/// Backward record: parents plus whatever the forward pass saved.
#[derive(Debug)]
pub(crate) enum Op {
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    Mean { a: TensorId },
    Sum { a: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { a: TensorId, axis: usize, start: usize },
    Softmax { a: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: TensorId },
    Relu { a: TensorId },
    Embedding { table: TensorId, ids: Vec<usize> },
    L1Loss { pred: TensorId, target: TensorId },
    L2Normalize { a: TensorId, norms: Vec<f64> },
    CosineRows { a: TensorId, b: TensorId, na: Vec<f64>, nb: Vec<f64> },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    CausalAttention { q: TensorId, k: TensorId, v: TensorId, heads: usize, probs: Vec<f64> },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<TensorId> {
        match self {
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Mean { a }
            | Op::Sum { a }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Slice { a, .. }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::Relu { a }
            | Op::L2Normalize { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::L1Loss { pred, target } => vec![*pred, *target],
            Op::CosineRows { a, b, .. } => vec![*a, *b],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Propagates the output gradient `g` of `out` into the parents' slots.
    pub(crate) fn backward(&self, t: &[Tensor], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match self {
            Op::MatMul { a, b } => {
                let (batch, m, k, n) = matmul_dims(&t[a.0].shape, &t[b.0].shape).expect("checked in forward");
                let (ad, bd) = (&t[a.0].data, &t[b.0].data);
                if let Some(ga) = grad_slot(t, grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        gemm(m, n, k, gi, false, bi, true, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(gb) = grad_slot(t, grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        gemm(k, m, n, ai, true, gi, false, 1.0, &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(ga) = grad_slot(t, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                }
                if let Some(gb) = grad_slot(t, grads, *b) {
                    for chunk in g.chunks(gb.len()) {
                        gb.iter_mut().zip(chunk).for_each(|(x, v)| *x += sign * v);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (&t[a.0].data, &t[b.0].data);
                let nb = bd.len();
                if let Some(ga) = grad_slot(t, grads, *a) {
                    for (gac, gc) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((x, v), y) in gac.iter_mut().zip(gc).zip(bd) {
                            *x += v * y;
                        }
                    }
                }
                if let Some(gb) = grad_slot(t, grads, *b) {
                    for (gc, ac) in g.chunks(nb).zip(ad.chunks(nb)) {
                        for ((x, v), y) in gb.iter_mut().zip(gc).zip(ac) {
                            *x += v * y;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += factor * v);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Transpose { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    // out has the swapped shape; transposing g back lands in a's layout
                    let s = &out.shape;
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    transpose_accumulate(g, r, c, ga);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = &out.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let width = t[p.0].shape[*axis] * inner;
                    if let Some(gp) = grad_slot(t, grads, *p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + width];
                            gp[o * width..(o + 1) * width].iter_mut().zip(src).for_each(|(x, v)| *x += v);
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = &t[a.0].shape;
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let dim = src_shape[*axis];
                let len = out.shape[*axis];
                if let Some(ga) = grad_slot(t, grads, *a) {
                    for o in 0..outer {
                        let dst = &mut ga[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, v)| *x += v);
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    let d = *out.shape.last().unwrap();
                    for ((y, gy), gx) in out.data.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s = dot(y, gy);
                        for j in 0..d {
                            gx[j] += y[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *out.shape.last().unwrap();
                let gam = &t[gamma.0].data;
                if let Some(gg) = grad_slot(t, grads, *gamma) {
                    for (xh, gy) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(t, grads, *beta) {
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(x, v)| *x += v);
                    }
                }
                if let Some(gx) = grad_slot(t, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (row, ((xh, gy), gxr)) in xhat.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gy[j] * gam[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            gxr[j] += inv_std[row] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let f = *out.shape.last().unwrap();
                let n = out.data.len() / f;
                let gam = &t[gamma.0].data;
                if let Some(gg) = grad_slot(t, grads, *gamma) {
                    for (xh, gy) in xhat.chunks(f).zip(g.chunks(f)) {
                        for j in 0..f {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(t, grads, *beta) {
                    for gy in g.chunks(f) {
                        gb.iter_mut().zip(gy).for_each(|(x, v)| *x += v);
                    }
                }
                if let Some(gx) = grad_slot(t, grads, *x) {
                    if *training {
                        let mut m1 = vec![0.0; f];
                        let mut m2 = vec![0.0; f];
                        for (xh, gy) in xhat.chunks(f).zip(g.chunks(f)) {
                            for j in 0..f {
                                m1[j] += gy[j] * gam[j];
                                m2[j] += gy[j] * gam[j] * xh[j];
                            }
                        }
                        for j in 0..f {
                            m1[j] /= n as f64;
                            m2[j] /= n as f64;
                        }
                        for ((xh, gy), gxr) in xhat.chunks(f).zip(g.chunks(f)).zip(gx.chunks_mut(f)) {
                            for j in 0..f {
                                gxr[j] += inv_std[j] * (gy[j] * gam[j] - m1[j] - xh[j] * m2[j]);
                            }
                        }
                    } else {
                        for (gy, gxr) in g.chunks(f).zip(gx.chunks_mut(f)) {
                            for j in 0..f {
                                gxr[j] += gy[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    for ((x, v), s) in ga.iter_mut().zip(g).zip(&t[a.0].data) {
                        *x += v * gelu_grad(*s);
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    for ((x, v), s) in ga.iter_mut().zip(g).zip(&t[a.0].data) {
                        if *s > 0.0 {
                            *x += v;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = grad_slot(t, grads, *table) {
                    let d = t[table.0].shape[1];
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(x, v)| *x += v);
                    }
                }
            }
            Op::L1Loss { pred, target } => {
                let (p, q) = (&t[pred.0].data, &t[target.0].data);
                let s = g[0] / p.len() as f64;
                if let Some(gp) = grad_slot(t, grads, *pred) {
                    for i in 0..p.len() {
                        gp[i] += s * sign(p[i] - q[i]);
                    }
                }
                if let Some(gq) = grad_slot(t, grads, *target) {
                    for i in 0..p.len() {
                        gq[i] -= s * sign(p[i] - q[i]);
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                if let Some(ga) = grad_slot(t, grads, *a) {
                    let d = *out.shape.last().unwrap();
                    for (row, ((y, gy), gx)) in out.data.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)).enumerate() {
                        let nrm = norms[row];
                        if nrm > EPS {
                            let s = dot(y, gy);
                            for j in 0..d {
                                gx[j] += (gy[j] - y[j] * s) / nrm;
                            }
                        } else {
                            for j in 0..d {
                                gx[j] += gy[j] / EPS;
                            }
                        }
                    }
                }
            }
            Op::CosineRows { a, b, na, nb } => {
                let d = *t[a.0].shape.last().unwrap();
                let (ad, bd) = (&t[a.0].data, &t[b.0].data);
                for (this, other, n_this, n_other) in [(a, &bd, na, nb), (b, &ad, nb, na)] {
                    let this_data = &t[this.0].data;
                    if let Some(gt) = grad_slot(t, grads, *this) {
                        for row in 0..out.data.len() {
                            let (x, y) = (&this_data[row * d..(row + 1) * d], &other[row * d..(row + 1) * d]);
                            let c = out.data[row];
                            let denom = n_this[row] * n_other[row];
                            // the max(‖x‖, ε) clamp has zero derivative when active
                            let active = dot(x, x).sqrt() > EPS;
                            let gx = &mut gt[row * d..(row + 1) * d];
                            for j in 0..d {
                                let mut dc = y[j] / denom;
                                if active {
                                    dc -= c * x[j] / (n_this[row] * n_this[row]);
                                }
                                gx[j] += g[row] * dc;
                            }
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                crate::attention::attention_backward(t, *q, *k, *v, *heads, probs, g, grads);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose_accumulate(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    let plane = rows * cols;
    for (s, d) in src.chunks(plane).zip(dst.chunks_mut(plane)) {
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] += s[r * cols + c];
            }
        }
    }
}

/// `(batch, m, k, n)` for a conforming matmul pair.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Some((*ba, *m, *k, *n)),
        _ => None,
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    fn mismatch(&self, op: OpKind, a: TensorId, b: TensorId) -> TensorError {
        TensorError::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    /// Generic entry point dispatching on `kind`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[TensorId], attrs: &Attrs) -> Result<TensorId> {
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Arity { op: kind, expected: n, got: inputs.len() })
            }
        };
        let bad = || TensorError::BadAttrs { op: kind };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::MulElementwise => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale => {
                arity(1)?;
                match attrs {
                    Attrs::Scale(c) => Ok(self.scale(inputs[0], *c)),
                    _ => Err(bad()),
                }
            }
            OpKind::Mean => arity(1).map(|_| self.mean(inputs[0])),
            OpKind::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Reshape => {
                arity(1)?;
                match attrs {
                    Attrs::Shape(s) => self.reshape(inputs[0], s),
                    _ => Err(bad()),
                }
            }
            OpKind::Concat => match attrs {
                Attrs::Axis(axis) => self.concat(inputs, *axis),
                _ => Err(bad()),
            },
            OpKind::Slice => {
                arity(1)?;
                match attrs {
                    Attrs::Range { axis, start, end } => self.slice(inputs[0], *axis, *start, *end),
                    _ => Err(bad()),
                }
            }
            OpKind::SoftmaxLastDim => arity(1).map(|_| self.softmax(inputs[0])),
            OpKind::LayerNorm => arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2])),
            OpKind::Gelu => arity(1).map(|_| self.gelu(inputs[0])),
            OpKind::Relu => arity(1).map(|_| self.relu(inputs[0])),
            OpKind::EmbeddingLookup => {
                arity(1)?;
                match attrs {
                    Attrs::Ids(ids) => self.embedding(inputs[0], ids),
                    _ => Err(bad()),
                }
            }
            OpKind::L1Loss => arity(2).and_then(|_| self.l1_loss(inputs[0], inputs[1])),
            OpKind::L2NormalizeLastDim => arity(1).map(|_| self.l2_normalize(inputs[0])),
            OpKind::CosineRows => arity(2).and_then(|_| self.cosine_rows(inputs[0], inputs[1])),
            OpKind::CausalAttention => {
                arity(3)?;
                match attrs {
                    Attrs::Heads(h) => self.causal_attention(inputs[0], inputs[1], inputs[2], *h),
                    _ => Err(bad()),
                }
            }
            OpKind::BatchNorm => Err(TensorError::InvalidInput {
                op: kind,
                reason: "batch_norm carries running statistics; call batchnorm::batch_norm".into(),
            }),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (batch, m, k, n) =
            matmul_dims(self.shape(a), self.shape(b)).ok_or_else(|| self.mismatch(OpKind::MatMul, a, b))?;
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if self.shape(a).len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(shape, out, Op::MatMul { a, b }))
    }

    fn broadcast_binary(
        &mut self,
        kind: OpKind,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(self.mismatch(kind, a, b));
        }
        let (ad, bd) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ad.len());
        for chunk in ad.chunks(bd.len()) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        let shape = self.shape(a).to_vec();
        let op = match kind {
            OpKind::Add => Op::Add { a, b },
            OpKind::Sub => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary(OpKind::MulElementwise, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, factor })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean { a })
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).iter().sum::<f64>();
        self.push(vec![1], vec![s], Op::Sum { a })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::InvalidInput {
                op: OpKind::Transpose,
                reason: format!("needs rank >= 2, got shape {shape:?}"),
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out = vec![0.0; shape.iter().product()];
        transpose_accumulate(self.value(a), r, c, &mut out);
        let mut new_shape = shape;
        let len = new_shape.len();
        new_shape.swap(len - 2, len - 1);
        Ok(self.push(new_shape, out, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Reshape,
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Arity { op: OpKind::Concat, expected: 1, got: 0 });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidInput {
                op: OpKind::Concat,
                reason: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total_dim = 0;
        for &p in parts {
            let s = self.shape(p);
            let conforming =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conforming {
                return Err(self.mismatch(OpKind::Concat, first, p));
            }
            total_dim += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for &p in parts {
                let width = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = total_dim;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidInput {
                op: OpKind::Slice,
                reason: format!("range {start}..{end} on axis {axis} invalid for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let len = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, Op::Slice { a, axis, start }))
    }

    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let d = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax { a })
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(self.mismatch(OpKind::LayerNorm, x, p));
            }
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mu) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv[j] + bv[j];
                }
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu { a })
    }

    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.shape(table).to_vec();
        let [vocab, d] = shape[..] else {
            return Err(TensorError::InvalidInput {
                op: OpKind::EmbeddingLookup,
                reason: format!("table must be rank 2, got {shape:?}"),
            });
        };
        if ids.is_empty() {
            return Err(TensorError::InvalidInput { op: OpKind::EmbeddingLookup, reason: "no ids".into() });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::InvalidInput {
                op: OpKind::EmbeddingLookup,
                reason: format!("id {bad} out of range for vocabulary of {vocab}"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn l1_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch(OpKind::L1Loss, pred, target));
        }
        let (p, q) = (self.value(pred), self.value(target));
        let l = p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>() / p.len() as f64;
        Ok(self.push(vec![1], vec![l], Op::L1Loss { pred, target }))
    }

    pub fn l2_normalize(&mut self, a: TensorId) -> TensorId {
        let d = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = dot(row, row).sqrt();
            norms.push(n);
            let denom = n.max(EPS);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::L2Normalize { a, norms })
    }

    /// Row-wise cosine similarity `a·b / (max(‖a‖,ε)·max(‖b‖,ε))`.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() > 2 {
            return Err(self.mismatch(OpKind::CosineRows, a, b));
        }
        let d = *self.shape(a).last().unwrap();
        let rows = self.value(a).len() / d;
        let (av, bv) = (self.value(a), self.value(b));
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let nx = dot(x, x).sqrt().max(EPS);
            let ny = dot(y, y).sqrt().max(EPS);
            out.push(dot(x, y) / (nx * ny));
            na.push(nx);
            nb.push(ny);
        }
        Ok(self.push(vec![rows], out, Op::CosineRows { a, b, na, nb }))
    }

    /// Cosine similarity of two vectors of equal length, as a `[1]` tensor.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(self.mismatch(OpKind::CosineRows, a, b));
        }
        self.cosine_rows(a, b)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
