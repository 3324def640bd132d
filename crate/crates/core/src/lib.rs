//! Input-feature-agnostic graph learning.
//!
//! Node features from arbitrary spaces are pushed through a stochastic
//! Gaussian projection into a shared dimension, node-covariance operators
//! built from the (propagated) projections drive a multi-operator
//! message-passing encoder, and frozen-encoder transfer adapts the result to
//! datasets with entirely new input features. The `verify` module turns every
//! invariance and consistency guarantee of the construction into an
//! executable, seeded check.

pub mod accum;
pub mod error;
pub mod encoder;
pub mod grad;
pub mod graph;
pub mod loss;
pub mod matrix;
pub mod operators;
pub mod projection;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::{center_over_nodes, Matrix};
pub use rng::{gaussian_matrix, random_orthogonal, SeedStream};
