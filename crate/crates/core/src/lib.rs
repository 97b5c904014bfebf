//! Joint calibration of distributed microphone arrays and sound-source
//! localization, with Fisher-information observability analysis.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: rotation convention and the DOA/TDOA forward models.
//! - [`scenario`]: ground-truth worlds, trajectory generators and noisy
//!   measurement synthesis.
//! - [`jacobian`]: the analytic Jacobian of the stacked observation model,
//!   its blocks, the FIM and a finite-difference oracle.
//! - [`observability`]: rank-preserving reductions of the Jacobian and the
//!   necessary/sufficient/degenerate-case checks built on them.
//! - [`calibrate`]: the weighted least-squares estimator and FIM-derived
//!   covariance.
//! - [`io`]: scenario, measurement, state and CSV file formats.
//! - [`cli`]: the command-line front end.

pub mod calibrate;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod jacobian;
pub mod linalg;
pub mod observability;
pub mod scenario;

pub use error::{Error, Result};
