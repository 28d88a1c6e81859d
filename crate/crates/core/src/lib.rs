//! Self-supervised learning of constrained optimization solutions.
//!
//! A multilayer perceptron predicts the free coordinates `x` of a program's
//! decision vector; a completion map solves the equality constraints for the
//! remaining coordinates `z`, and gradients flow back through that map by
//! implicit differentiation. Inequality constraints are handled by Lagrange
//! dual ascent between rounds of SGD on the network weights.
//!
//! Module overview:
//!
//! * [`numerics`]: dense LU, pseudo-inverse, Newton root finding.
//! * [`network`]: the MLP with manual backward pass and Adam.
//! * [`problems`]: program instances, the feasible-by-construction generator,
//!   datasets.
//! * [`completion`]: linear and Newton completion plus the implicit Jacobian.
//! * [`training`]: primal-dual training with and without equality embedding,
//!   and a supervised baseline.
//! * [`oracle`]: reference solvers and the Monte-Carlo check of the expected
//!   equality violation of noisy predictions.
//! * [`reporting`]: feasibility/optimality/timing evaluation.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }};
}

pub mod completion;
pub mod error;
pub mod exec;
pub mod network;
pub mod numerics;
pub mod oracle;
pub mod problems;
pub mod reporting;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, NewtonReport};
