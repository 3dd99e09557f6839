//! Sparse spatial guided propagation: sparsity-aware, image-guided
//! interpolation of scattered flow, scene-flow and depth samples into dense
//! maps, with a small reverse-mode autodiff engine to train the networks.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod param;
pub mod propagation;
pub mod scalar;
pub mod selftest;
pub mod sparse;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use sparse::{MaskedFeature, MaskedVar};
pub use tensor::{Shape, Tensor};
