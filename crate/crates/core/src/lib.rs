//! Continual learning with interference-free low-rank adapters.
//!
//! Module map:
//! - [`linalg`]: dense matrices, Jacobi SVD, subspace projections.
//! - [`model`]: feed-forward classifier with per-task low-rank branches.
//! - [`gpmem`]: dual gradient projection memory per adapted layer.
//! - [`inflora`]: `B_t` design, the per-task training procedure, ablations.
//! - [`data`]: synthetic class-incremental task streams, CSV ingestion.
//! - [`eval`]: accuracy matrices, parameter accounting, classifier alignment.
//! - [`experiment`], [`checkpoint`], [`checks`]: the experiment runner
//!   behind the `inflora` command-line tool.

pub mod checkpoint;
pub mod checks;
mod clock;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gpmem;
pub mod inflora;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
