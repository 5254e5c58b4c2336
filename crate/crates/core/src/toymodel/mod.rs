// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ground-truth oracle: a small random transformer with residual hooks, a
//! synthetic SAE with known directions, and a planted-feature dump
//! generator.

mod planted;
mod sae;
mod transformer;
mod world;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};

pub use planted::{label_name, Layout, PlantedSpec, SharedGroup, StrengthRange};
pub use sae::{random_dictionary, SaeLayer, SyntheticSae};
pub use transformer::{ForwardOutput, Generation, InterventionScope, ToyTransformer};
pub use world::{
    generate_synthetic_dump, CorpusMix, GenerationPlan, ToyWorld, WorldConfig, MODEL_ID,
};

/// Toy transformer and SAE hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_layers: u32,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub d_sae: usize,
    pub seed: u64,
    /// Tie token embeddings and unembeddings to SAE decoder directions.
    pub aligned_unembedding: bool,
    /// Norm of a token embedding.
    pub embed_scale: f64,
    /// Norm scale of positional embeddings.
    pub pos_scale: f64,
    /// Gain on each block's attention and MLP output projections.
    pub block_gain: f64,
    /// Gain on the query projection; small values flatten attention.
    pub qk_gain: f64,
    /// Multiplier on the unembedding logits.
    pub logit_gain: f64,
    /// SAE encoder bias is `-sae_threshold`.
    pub sae_threshold: f64,
    pub temperature: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            vocab: 64,
            max_seq: 32,
            d_sae: 128,
            seed: 0,
            aligned_unembedding: true,
            embed_scale: 4.0,
            pos_scale: 0.5,
            block_gain: 0.3,
            qk_gain: 1.0,
            logit_gain: 1.0,
            sae_threshold: 2.0,
            temperature: 0.9,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.vocab == 0
            || self.max_seq == 0
            || self.d_sae == 0
        {
            return Err(CueError::invalid("toy model sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CueError::invalid("d_model must be divisible by n_heads"));
        }
        if self.d_sae < self.d_model {
            return Err(CueError::invalid("d_sae must be at least d_model"));
        }
        let finite = [
            self.embed_scale,
            self.pos_scale,
            self.block_gain,
            self.qk_gain,
            self.logit_gain,
            self.sae_threshold,
        ];
        if finite.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(CueError::invalid(
                "toy model scales must be finite and non-negative",
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(CueError::invalid("temperature must be non-negative"));
        }
        Ok(())
    }
}

/// Reads a JSON config of type `T`.
pub fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CueError::MissingInput(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| CueError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CueError::json(path, e))
}
