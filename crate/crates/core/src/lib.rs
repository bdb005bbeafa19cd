//! Evidence-driven keyframe selection.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, stable elementary functions, seeded randomness,
//!   and a central-difference gradient oracle.
//! - [`infotheory`]: exact conditional mutual information on small discrete models,
//!   used to check monotonicity, submodularity and the greedy / modular-bound selectors.
//! - [`scoring`]: the query-conditioned evidence scorer (causal window attention,
//!   query gating, subspace cosine heads, blend with the raw embedding cosine).
//! - [`training`]: multi-positive InfoNCE, analytic backpropagation, Adam, and the
//!   deterministic training loop.
//! - [`selection`]: bin partitioning, per-bin top-k selection, uniform baseline and
//!   evidence coverage.
//! - [`io`]: the embedding, annotation and checkpoint file formats.
//! - [`synthetic`]: planted corpora and two-class generators used by tests, the CLI
//!   and the acceptance suite.

pub mod error;
pub mod infotheory;
pub mod io;
pub mod numerics;
pub mod scoring;
pub mod selection;
pub mod synthetic;
pub mod training;

pub use error::{Error, FormatError, Result};
