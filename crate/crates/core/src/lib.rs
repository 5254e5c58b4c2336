// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cultural feature discovery, diagnosis and steering over sparse
//! autoencoder activations.
//!
//! Stages: [`corpus`] sampling, [`activations`] dumps, MI-based
//! [`selection`], [`cue`] prototypes and bias scores, [`steering`]
//! vectors, [`probes`], and [`eval`] judging. [`toymodel`] is a
//! ground-truth oracle for all of them.

pub mod activations;
pub mod corpus;
pub mod cue;
pub mod error;
pub mod eval;
pub mod probes;
pub mod rng;
pub mod selection;
pub mod steering;
pub mod toymodel;

pub use error::{CueError, Result};
