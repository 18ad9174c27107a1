//! Minimal dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! Every operation is a method on [`Tape`] returning a [`Var`]. Gradients are
//! produced by a single reverse sweep ([`Tape::backward`]) and verified by
//! [`gradient_check`].
//!
//! ```
//! use pavescan_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use real::Real;
pub use tape::{Activation, BatchStats, Binary, Combine, NormMode, Pool, Tape, Unary, Var};
pub use tensor::Tensor;

/// Scalar logistic function, shared with decoding code.
pub fn sigmoid<T: Real>(x: T) -> T {
    kernels::sigmoid(x)
}
