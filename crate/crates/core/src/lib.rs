//! Involution, its convolution and windowed-attention relatives, and the
//! RedNet family of residual networks built from them.
//!
//! * [`tensor`] and [`prng`]: dense `f64` arrays and a seeded random source.
//! * [`nnops`]: operator kernels with hand-written gradients.
//! * [`autodiff`]: a reverse-mode tape over those kernels and a
//!   finite-difference gradient checker.
//! * [`rednet`]: declarative architectures, analytic parameter/MAC counts and
//!   an executable model.
//! * [`harness`]: reference oracles, synthetic data, toy training, benchmarks
//!   and kernel heat maps.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod nnops;
pub mod prng;
pub mod rednet;
pub mod tensor;

pub use error::{Error, Result};
pub use prng::Prng;
pub use tensor::Tensor;
