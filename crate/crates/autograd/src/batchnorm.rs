//! Batch normalization over the row axis of a `[batch, features]` tensor.

use crate::error::{Result, TensorError};
use crate::ops::{Op, OpKind, EPS};
use crate::tape::{Tape, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Training,
    /// Normalize with the running estimates.
    Frozen,
}

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// are ordinary trainable tensors handed to [`batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    pub fn new(features: usize, momentum: f64) -> Self {
        Self { running_mean: vec![0.0; features], running_var: vec![1.0; features], momentum, mode: BnMode::Training }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

/// `gamma · (x − μ) / sqrt(σ² + ε) + beta`, per feature column.
///
/// Training mode uses the biased batch variance and folds the batch
/// statistics into the running estimates with `momentum`.
pub fn batch_norm(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    state: &mut BatchNormState,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let [n, f] = shape[..] else {
        return Err(TensorError::InvalidInput {
            op: OpKind::BatchNorm,
            reason: format!("expected [batch, features], got {shape:?}"),
        });
    };
    for p in [gamma, beta] {
        if tape.shape(p) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::BatchNorm,
                lhs: shape.clone(),
                rhs: tape.shape(p).to_vec(),
            });
        }
    }
    if state.features() != f {
        return Err(TensorError::ShapeMismatch {
            op: OpKind::BatchNorm,
            lhs: shape.clone(),
            rhs: vec![state.features()],
        });
    }
    let training = state.mode == BnMode::Training;
    if training && n < 2 {
        return Err(TensorError::DegenerateBatch(n));
    }

    let xv = tape.value(x);
    let (mean, var) = if training {
        let mut mean = vec![0.0; f];
        for row in xv.chunks(f) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in xv.chunks(f) {
            for j in 0..f {
                var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
    let (gv, bv) = (tape.value(gamma), tape.value(beta));
    let mut xhat = vec![0.0; n * f];
    let mut out = vec![0.0; n * f];
    for (r, row) in xv.chunks(f).enumerate() {
        for j in 0..f {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat[r * f + j] = h;
            out[r * f + j] = gv[j] * h + bv[j];
        }
    }
    if training {
        let m = state.momentum;
        for j in 0..f {
            state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
            state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j];
        }
    }
    Ok(tape.push(shape, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }))
}
