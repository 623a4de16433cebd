//! Desk-scale class-incremental learning laboratory built around cross-class
//! feature augmentation (CCFA).
//!
//! The crate trains a sequence of tasks with disjoint label sets on top of
//! small feature-space models (identity / linear / MLP extractors with cosine
//! or local-similarity classifiers). Between stages it keeps a herding-selected
//! exemplar buffer and a frozen snapshot of the previous model. CCFA attacks
//! the frozen classifier with sign-gradient steps to push current features
//! across old decision boundaries, then pseudo-labels the perturbed features
//! and mixes them into the classification loss.
//!
//! Module map:
//! - [`numerics`]: dense matrices, seeded splittable RNG, finite-difference
//!   gradient checking.
//! - [`model`]: feature extractors, cosine / LSC classifiers, frozen snapshots.
//! - [`losses`]: classification and distillation losses with analytic
//!   gradients.
//! - [`ccfa`]: confidence matrix, target selection (exact, relaxed LP, ablation
//!   strategies), the PGD feature attack, and augmented-batch assembly.
//! - [`memory`]: herding exemplar selection and the per-class memory buffer.
//! - [`data`]: synthetic task streams and feature-file I/O.
//! - [`trainer`]: the per-stage SGD loop, balanced classifier fine-tuning, and
//!   full experiment runs.
//! - [`eval`]: average incremental accuracy, forgetting, new-class accuracy,
//!   and 2-D point dumps.
//! - [`cli`]: config-driven `run` / `sweep` / `gradcheck` / `oracle` / `report`
//!   commands.

// Dense kernels index several matrices in lockstep; the range-loop form is
// the readable one there.
#![allow(clippy::needless_range_loop)]

pub mod ccfa;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
