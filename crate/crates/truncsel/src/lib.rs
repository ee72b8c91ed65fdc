//! Correction of endogenous truncation bias in sample-selection models.
//!
//! The pipeline fits a latent class model to an expert survey, turns the
//! experts' binary opinions into reference-group participant shares, and
//! estimates a partially linear single-index model whose bias term is a
//! transformed cosine or Fourier series in the selection index. A SCAD
//! penalty on the share coefficients selects the number of reference groups.

pub mod data;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod lca;
pub mod opinion;
pub mod penalty;
pub mod seeding;
pub mod sieve;

pub use error::{Error, Result};
