//! Multi-head causal self-attention.

use crate::error::{Result, TensorError};
use crate::kernels::dot;
use crate::ops::{softmax_in_place, Op, OpKind};
use crate::tape::{grad_slot, Tape, Tensor, TensorId};

/// Projection weights for one attention layer. Matrices are `[d, d]` and
/// applied as `x · W`; biases are optional `[d]` vectors.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub bq: Option<TensorId>,
    pub bk: Option<TensorId>,
    pub bv: Option<TensorId>,
    pub bo: Option<TensorId>,
}

impl AttentionWeights {
    pub fn without_bias(wq: TensorId, wk: TensorId, wv: TensorId, wo: TensorId) -> Self {
        Self { wq, wk, wv, wo, bq: None, bk: None, bv: None, bo: None }
    }
}

/// `(batch, t, d)` of a `[t,d]` or `[b,t,d]` tensor.
fn seq_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [t, d] => Some((1, t, d)),
        [b, t, d] => Some((b, t, d)),
        _ => None,
    }
}

impl Tape {
    /// Scaled dot-product attention core over pre-projected `q`, `k`, `v`,
    /// with position `t` attending to positions `0..=t` only.
    pub fn causal_attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> Result<TensorId> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: OpKind::CausalAttention,
                    lhs: shape.clone(),
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        let (batch, t, d) = seq_dims(&shape).ok_or_else(|| TensorError::InvalidInput {
            op: OpKind::CausalAttention,
            reason: format!("expected [t,d] or [b,t,d], got {shape:?}"),
        })?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidInput {
                op: OpKind::CausalAttention,
                reason: format!("model width {d} not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; batch * t * d];
        for b in 0..batch {
            let base = b * t * d;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv[base + i * d + off..base + i * d + off + dh];
                    let p = &mut probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i) * t + i + 1];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = scale * dot(qi, &kv[base + j * d + off..base + j * d + off + dh]);
                    }
                    softmax_in_place(p);
                    let o = &mut out[base + i * d + off..base + i * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[base + j * d + off..base + j * d + off + dh];
                        o.iter_mut().zip(vj).for_each(|(x, y)| *x += pj * y);
                    }
                }
            }
        }
        Ok(self.push(shape, out, Op::CausalAttention { q, k, v, heads, probs }))
    }

    /// Full attention layer over `x` of shape `[t,d]` or `[b,t,d]`.
    pub fn causal_self_attention(&mut self, x: TensorId, w: &AttentionWeights, heads: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (batch, t, d) = seq_dims(&shape).ok_or_else(|| TensorError::InvalidInput {
            op: OpKind::CausalAttention,
            reason: format!("expected [t,d] or [b,t,d], got {shape:?}"),
        })?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidInput {
                op: OpKind::CausalAttention,
                reason: format!("model width {d} not divisible by {heads} heads"),
            });
        }
        let flat = self.reshape(x, &[batch * t, d])?;
        let project = |tape: &mut Tape, wm: TensorId, bias: Option<TensorId>| -> Result<TensorId> {
            let mut y = tape.matmul(flat, wm)?;
            if let Some(b) = bias {
                y = tape.add(y, b)?;
            }
            tape.reshape(y, &[batch, t, d])
        };
        let q = project(self, w.wq, w.bq)?;
        let k = project(self, w.wk, w.bk)?;
        let v = project(self, w.wv, w.bv)?;
        let mixed = self.causal_attention(q, k, v, heads)?;
        let mixed = self.reshape(mixed, &[batch * t, d])?;
        let mut y = self.matmul(mixed, w.wo)?;
        if let Some(b) = w.bo {
            y = self.add(y, b)?;
        }
        self.reshape(y, &shape)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    tensors: &[Tensor],
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
    probs: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (batch, t, d) = seq_dims(&tensors[q.0].shape).expect("checked in forward");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (&tensors[q.0].data, &tensors[k.0].data, &tensors[v.0].data);
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut ds = vec![0.0; t];
    for b in 0..batch {
        let base = b * t * d;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let row = ((b * heads + h) * t + i) * t;
                let p = &probs[row..row + i + 1];
                let go = &g[base + i * d + off..base + i * d + off + dh];
                let mut s = 0.0;
                for j in 0..=i {
                    let vj = base + j * d + off;
                    let dp = dot(go, &vv[vj..vj + dh]);
                    ds[j] = dp;
                    s += p[j] * dp;
                    dv[vj..vj + dh].iter_mut().zip(go).for_each(|(x, y)| *x += p[j] * y);
                }
                let qi = base + i * d + off;
                for j in 0..=i {
                    let dsj = scale * p[j] * (ds[j] - s);
                    let kj = base + j * d + off;
                    for c in 0..dh {
                        dq[qi + c] += dsj * kv[kj + c];
                        dk[kj + c] += dsj * qv[qi + c];
                    }
                }
            }
        }
    }
    for (id, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(slot) = grad_slot(tensors, grads, id) {
            slot.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
        }
    }
}
