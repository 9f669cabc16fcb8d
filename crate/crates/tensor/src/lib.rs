//! Dense `f64` tensors and a reverse-mode automatic differentiation tape.
//!
//! Values are computed eagerly as operations are recorded on a [`Tape`];
//! [`Tape::backward`] then sweeps the recording in reverse. The operator set
//! is closed (see [`OpKind`]) and every operator has a backward rule that is
//! checked against central differences in the test suite.
//!
//! ```
//! use repre_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(&[1.0, 2.0]));
//! let sq = tape.mul(x, x)?;
//! let loss = tape.mean(sq, None)?;
//! tape.backward(loss)?;
//! assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
//! # Ok::<(), repre_tensor::TensorError>(())
//! ```

mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, finite_difference_check_multi, operator_cases, GradCase, GradCheckReport};
pub use ops::reduce::{L2_NORM_FLOOR, LAYER_NORM_EPS};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
