//! Reverse-mode automatic differentiation over row-major `f64` tensors.
//!
//! A [`Tape`] records one forward graph. Long-lived weights sit in a
//! [`ParamStore`] and are copied onto each tape with [`Tape::bind`]; after
//! [`Tape::backward`] their gradients are read back with [`Tape::grads_of`]
//! and applied with [`AdamState::step`].
//!
//! ```
//! use sf_autograd::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod adam;
mod attention;
pub mod batchnorm;
mod error;
mod gradcheck;
mod kernels;
mod ops;
mod param;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::AttentionWeights;
pub use batchnorm::{batch_norm, BatchNormState, BnMode};
pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use ops::{Attrs, OpKind, EPS};
pub use param::{Bound, Param, ParamId, ParamStore};
pub use tape::{Tape, Tensor, TensorId};
