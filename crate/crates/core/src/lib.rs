//! Kernel VICReg: the VICReg self-supervised objective lifted into a
//! reproducing kernel Hilbert space.
//!
//! The invariance, variance and covariance terms are computed from Gram
//! matrices of the projector outputs:
//!
//! - invariance: mean squared RKHS distance between paired views,
//!   `(1/b)·tr(K(x,x) + K(x',x') − 2K(x,x'))`;
//! - variance: a hinge on `sqrt(λᵢ/b + ε)` for the eigenvalues `λᵢ` of the
//!   double-centered Gram `K̂ = HKH`;
//! - covariance: the Hilbert–Schmidt norm of the RKHS covariance operator,
//!   read off the off-diagonal entries of `K̂`.
//!
//! Around the loss sit the pieces needed to train and evaluate at desk
//! scale: a Jacobi eigensolver, an MLP encoder with Adam, synthetic data
//! and augmentations, an IDX loader, a linear probe and a training driver.

pub mod data;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod loss;
mod matrix;
pub mod probe;
pub mod train;

pub use error::{Error, Result};
pub use kernels::{Bandwidth, EmbeddingBatch, GramMatrix, KernelKind, KernelSpec};
pub use loss::{LossGradients, LossReport, LossWeights, Objective};
pub use matrix::Matrix;
