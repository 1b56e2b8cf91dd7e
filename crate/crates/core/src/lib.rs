//! Lipschitz-constrained differentiable cell search.
//!
//! Architecture weights are drawn from trainable log-normal distributions,
//! which lets the network-wide Lipschitz bound be carried in closed form as
//! a single log-normal. A confidence constraint on that bound is enforced
//! with an augmented Lagrangian while the supernet trains, and the searched
//! cells are evaluated under white-box and transfer attacks.

// NaN-rejecting guards are written as negated comparisons on purpose, and
// published rational-approximation coefficients keep all their digits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod attacks;
pub mod dataio;
pub mod diffgraph;
pub mod error;
pub mod lognormal;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod verify;

pub use error::{Error, Result};
