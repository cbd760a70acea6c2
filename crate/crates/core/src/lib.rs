//! Bias-variance laboratory core.
//!
//! Numerical machinery for studying how adversarial input perturbations
//! interact with the bias-variance structure of ensemble predictors:
//!
//! - a reverse-mode autodiff [`graph`](crate::graph) with a finite-difference
//!   oracle ([`finite_diff`]),
//! - multilayer perceptrons and seeded SGD training ([`model`]),
//! - ensembles with arithmetic-mean and geometric-mean geometry
//!   ([`ensemble`]),
//! - gradient-based input attacks ([`attack`]),
//! - exact and first-order decompositions of squared-error and
//!   cross-entropy losses under perturbation ([`decompose`]),
//! - synthetic task generators ([`data`]) and a CIFAR-10 binary codec
//!   ([`cifar`]).
//!
//! All numerics are generic over the scalar type via [`Scalar`]; the `f64`
//! instantiations below are what the verification suite and the CLI use.

pub mod advtrain;
pub mod attack;
pub mod cifar;
pub mod data;
pub mod decompose;
pub mod ensemble;
pub mod error;
pub mod finite_diff;
pub mod graph;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor, the working type of the verification suite.
pub type Tensor64 = tensor::Tensor<f64>;
/// Double-precision autodiff graph.
pub type Graph64 = graph::Graph<f64>;
/// Double-precision model.
pub type Model64 = model::Model<f64>;
/// Double-precision ensemble.
pub type Ensemble64 = ensemble::Ensemble<f64>;
/// Double-precision dataset.
pub type LabeledDataset64 = data::LabeledDataset<f64>;
