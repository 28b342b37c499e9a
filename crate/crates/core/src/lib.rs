//! Quantum process identification.
//!
//! Simulates repeated qubit processes with hidden (non-Markovian) degrees of
//! freedom, samples time-resolved tomographic count data, infers a minimal
//! linear state-space model `F(t) = S·T^t·P` from that data and scores the
//! inferred model against ground truth.
//!
//! The pipeline is split along the same lines as the crate's modules:
//!
//! * [`schedule`] builds the biexponential experiment design,
//! * [`sim`] produces exact probabilities and binomially sampled datasets,
//! * [`data`] reads and writes datasets, truth tables and variance estimates,
//! * [`hankel`] arranges data into block-Hankel matrices and implements the
//!   exact Ho-Kalman realization,
//! * [`dimension`] estimates the number of significant singular values,
//! * [`inference`] runs the weighted initial fit, progressive block fitting
//!   and the final penalized fit,
//! * [`evaluation`] computes trace-distance error curves,
//! * [`config`] parses scenario presets and run options,
//! * [`runner`] chains simulation, inference and evaluation into seeded
//!   multi-run pipelines with per-run output directories.

pub mod config;
pub mod data;
pub mod dimension;
pub mod error;
pub mod evaluation;
pub mod hankel;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod runner;
pub mod schedule;
pub mod sim;

pub use error::{QpiError, Result};
pub use model::Model;
pub use schedule::{Schedule, ScheduleParams};
