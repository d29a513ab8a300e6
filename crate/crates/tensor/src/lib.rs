//! Dense channel-first arrays with a reverse-mode autodiff tape.
//!
//! Just enough machinery for feature-matching registration networks:
//! broadcasting arithmetic, batched matmul, softmax, N-d convolution,
//! factor-two resampling, linear grid sampling and index gathers. Every
//! operation is differentiable with respect to all of its `Var` inputs.
//!
//! ```
//! use vfa_tensor::{Tensor, Var};
//!
//! let x = Var::param(Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod tensor;
mod var;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use ops::conv::{conv, same_padding};
pub use ops::linalg::{matmul, softmax};
pub use ops::sample::grid_sample;
pub use ops::shape::concat;
pub use tensor::{numel, strides, Tensor};
pub use var::{backward, BackwardFn, Var};
