//! Deterministic dense tensors with a reverse-mode gradient tape.
//!
//! The op set is exactly what small conv / attention / linear networks need:
//! 2-D convolution, scaled dot-product attention, group and layer
//! normalization, affine maps, elementwise activations and a handful of
//! shape ops. Broadcasting is limited to bias adds and scalar ops.
//!
//! ```
//! use cife_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?, true)?;
//! let k = tape.constant(Tensor::ones([1, 1, 2, 2]))?;
//! let y = tape.conv2d(x, k, None, 1, 0)?;
//! assert_eq!(tape.value(y).data(), &[10.0]);
//!
//! let loss = tape.sum(y)?;
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
//! # Ok::<(), cife_tensor::TensorError>(())
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod op_suite;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use op_suite::op_suite;
pub use rng::NoiseRng;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
