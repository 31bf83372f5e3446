//! Reliability-controlled ordinal grading of noisy unit-level estimates.
//!
//! The pipeline runs in stages: load measurements ([`ingest`]), estimate how
//! latent effects scale with measurement precision ([`precision`]), deconvolve
//! the latent mixing distribution ([`deconv`]), form unit posteriors and
//! pairwise ordering probabilities ([`posterior`]), assign grades by
//! minimizing posterior risk over transitive weak orders ([`solver`]), and
//! summarize reliability and informativeness of the result ([`metrics`]).

pub mod deconv;
pub mod error;
pub mod ingest;
pub mod matrix_io;
pub mod metrics;
pub mod optim;
mod par;
pub mod posterior;
pub mod precision;
pub mod solver;
pub mod spline;

pub use error::{Error, Result};
pub use ingest::UnitRecord;
pub use posterior::{PairwiseMatrices, PosteriorSummary, UnitPosterior};
pub use precision::PrecisionModelParams;
pub use solver::{GradeAssignment, RiskSpec};
