//! Scalable Gaussian-process emulation of expensive computer models.
//!
//! The emulator approximates the GP likelihood by an ordered product of
//! univariate conditionals, each conditioning on a small set of previously
//! ordered nearby points. Ordering and neighbor selection happen in a
//! range-scaled input space, so estimated anisotropy feeds back into the
//! approximation itself. On top of that sit Fisher-scoring parameter
//! estimation, joint prediction with sparse inverse Cholesky factors,
//! variance calibration, batch-sequential experimental design, and a
//! benchmark harness over standard test functions.
//!
//! Entry points:
//! - [`estimation::fit`] estimates covariance parameters from a dataset,
//! - [`prediction::predict`] produces a joint predictive distribution,
//! - [`design::two_stage_design`] selects inputs for a new experiment,
//! - [`evaluation::benchmark`] reproduces the reference study protocols.

pub mod covariance;
pub mod design;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod geometry;
pub mod likelihood;
pub mod prediction;

pub use error::{Error, Result};
