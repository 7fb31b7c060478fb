//! Minimal reverse-mode automatic differentiation over dense real and complex
//! n-dimensional arrays.
//!
//! Operations are evaluated eagerly and recorded on a [`Graph`]; calling
//! [`Graph::backward`] on a real scalar replays the record in reverse. The op
//! set is what an FFT-based imaging model and a small convolutional network
//! need: broadcasting elementwise arithmetic, a unitary 2-D FFT, 3x3/1x1
//! convolutions, 2x pooling, reductions and a few shape ops.
//!
//! ```
//! use ledvae_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
//! ```

mod conv;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use fft::FftDirection;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, PoolMode, Var};
pub use num_complex::Complex64;
pub use optim::{Adam, AdamConfig};
pub use tensor::{Dtype, Storage, Tensor};
