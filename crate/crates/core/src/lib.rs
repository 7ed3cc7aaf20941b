// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mechanistic-interpretability toolkit for persuasion-induced answer flips
//! in decoder-only transformers.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f32` kernels, Jacobi SVD, PCA.
//! - [`model`]: checkpoint container, architecture maps, tokenizers.
//! - [`engine`]: instrumented forward pass with overrides.
//! - [`interventions`]: restoration sweeps, pattern patching, steering, window patching.
//! - [`circuits`]: decision subspace, OV copy analysis, rank-1 QK fit, composition scores.
//! - [`promptkit`]: prompt pairs, spans, corpora.
//! - [`planted`]: a small synthetic model with a known circuit.

pub mod circuits;
pub mod engine;
pub mod error;
pub mod interventions;
pub mod model;
pub mod parallel;
pub mod planted;
pub mod promptkit;
pub mod tensor;

pub use error::{Error, Result};
