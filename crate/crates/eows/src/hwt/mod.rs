//! Haar-Walsh dictionaries on partition trees, best-basis selection, and
//! the 1-D/2-D transforms on a chosen basis.
//!
//! Each level of a partition tree induces an orthonormal basis of N atoms
//! (one per leaf position); the whole stack forms an overcomplete dictionary
//! generated by recursive averaging and differencing over folders. On a
//! uniform binary tree of dyadic length the root-level atoms are the
//! classical Walsh functions in sequency order. Best bases are chosen by
//! dynamic programming over admissible tilings built from recursive
//! row/column (time) and frequency splits.

mod bestbasis;
mod dictionary;
mod tensor;

pub use bestbasis::{
    best_basis_1d, best_basis_2d, finest_tiling, haar_tiling, sample_tiling_1d, sample_tiling_2d,
    BestBasis2D,
};
pub use dictionary::{
    atom_support, ghwt_analyze, ghwt_synthesize, AtomId, Dictionary, TreeDictionary,
};
pub use tensor::{inverse_2d, tensor_analyze, transform_2d, CoeffMap, TensorAnalysis};
