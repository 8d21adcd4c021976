//! The tape: an append-only arena of tensors plus the reverse sweep.
//!
//! Every op appends its output to the tape. Because outputs are always
//! created after their inputs, creation order is a topological order of the
//! graph and backward simply walks the arena in reverse.

use crate::error::{Result, TensorError};
use crate::ops::Op;

/// Handle to a tensor living on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward record of a non-leaf tensor.
#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
}

/// An n-dimensional row-major array of `f64` with optional gradient and
/// backward linkage.
#[derive(Debug)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) node: Option<Node>,
    pub(crate) requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn has_backward_record(&self) -> bool {
        self.node.is_some()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Arena holding one forward graph.
///
/// A tape is meant to live for a single forward/backward pass. Parameters are
/// bound onto it as leaves (see [`crate::ParamStore`]) and read back after
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) tensors: Vec<Tensor>,
    freed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Leaf tensor. `shape` entries must be positive and fill `data` exactly.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor { shape: shape.to_vec(), data, grad: None, node: None, requires_grad });
        Ok(id)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, true)
    }

    pub fn scalar_constant(&mut self, value: f64) -> TensorId {
        self.leaf(&[1], vec![value], false).expect("scalar shape is valid")
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Value of a one-element tensor.
    pub fn item(&self, id: TensorId) -> f64 {
        self.tensors[id.0].data[0]
    }

    pub(crate) fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Appends an op output. The backward record is kept only when some
    /// parent takes part in differentiation.
    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|&p| self.requires_grad(p));
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            shape,
            data,
            grad: None,
            node: requires_grad.then_some(Node { op }),
            requires_grad,
        });
        id
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every tensor that requires grad and is reachable from `loss` ends up
    /// holding d(loss)/d(tensor); contributions from several consumers are
    /// summed. Backward records are dropped afterwards, so a tape supports a
    /// single backward pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let loss_tensor = &self.tensors[loss.0];
        if loss_tensor.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_tensor.shape.clone()));
        }
        if self.freed {
            return Err(TensorError::GraphFreed);
        }
        if !loss_tensor.requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(node) = &self.tensors[i].node {
                node.op.backward(&self.tensors, &self.tensors[i], &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        for (tensor, g) in self.tensors.iter_mut().zip(grads) {
            if tensor.requires_grad {
                if let Some(g) = g {
                    match &mut tensor.grad {
                        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                        None => tensor.grad = Some(g),
                    }
                }
            }
        }
        for tensor in &mut self.tensors {
            tensor.node = None;
        }
        self.freed = true;
        Ok(())
    }
}

/// Gradient buffer of `id`, zero-initialised on first touch. `None` when the
/// tensor does not take part in differentiation.
pub(crate) fn grad_slot<'g>(
    tensors: &[Tensor],
    grads: &'g mut [Option<Vec<f64>>],
    id: TensorId,
) -> Option<&'g mut Vec<f64>> {
    let t = &tensors[id.0];
    if !t.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; t.data.len()]))
}
