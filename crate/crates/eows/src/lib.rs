//! Matrix denoising under separable-covariance noise.
//!
//! The library combines two complementary denoising mechanisms:
//!
//! * **Optimal shrinkage of singular values** ([`spectre`]): a fully
//!   data-driven estimate of the noise bulk edge, the effective rank, the
//!   clean singular values and the singular-vector overlaps, from which
//!   loss-specific optimal shrinkers are evaluated.
//! * **Tree-adapted Haar-Walsh wavelet shrinkage** ([`treegeo`], [`hwt`],
//!   [`shrinkage`]): coupled row/column partition trees are learned from the
//!   shrunk matrix, a tensor Haar-Walsh best basis is selected on them, and
//!   the transform coefficients are soft-thresholded with a per-coefficient
//!   variance derived from first-order singular-vector perturbation.
//!
//! [`pipeline`] chains the stages end to end, and [`simlab`] reproduces the
//! synthetic experiments (Helmholtz kernel, sinusoidal waves, three noise
//! models) used to evaluate the estimators.

pub mod error;
pub mod hwt;
pub mod matcore;
pub mod pipeline;
pub mod seed;
pub mod shrinkage;
pub mod simlab;
pub mod spectre;
pub mod treegeo;

pub use error::{EowsError, Result};
pub use matcore::{Mat, Metrics, SvdTriplet};
