//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Computation is define-by-run: build a [`Graph`] per forward pass, call
//! [`Graph::backward`] on a scalar, then move parameter gradients into a
//! [`ParamStore`] and step an [`Adam`] optimizer.
//!
//! ```
//! use amtpp_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::logsumexp;
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Exact GELU on a plain value.
pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}
