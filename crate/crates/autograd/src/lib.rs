//! A small dense `f64` tensor library with reverse-mode automatic
//! differentiation.
//!
//! Gradients are computed by [`grad`]. Backward rules are themselves
//! expressed with differentiable operations, so passing `create_graph = true`
//! yields gradients that can be differentiated again (Hessian-vector
//! products, differentiating through an inner gradient step, and so on).
//!
//! ```
//! use dhvae_autograd::{grad, Tensor};
//!
//! let x = Tensor::param(vec![3.0], &[1]);
//! let y = x.mul(&x).mul(&x).sum_all(); // x³
//! let dy = grad(&y, &[&x], true).remove(0); // 3x²
//! let d2y = grad(&dy.sum_all(), &[&x], false).remove(0); // 6x
//! assert_eq!(dy.item(), 27.0);
//! assert_eq!(d2y.item(), 18.0);
//! ```

mod engine;
pub mod functional;
mod kernels;
mod ops;
mod tensor;

pub use engine::{grad, grad_with};
pub use tensor::{is_grad_enabled, no_grad, set_grad_enabled, GradModeGuard, Tensor};
