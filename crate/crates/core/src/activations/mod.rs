// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse SAE activation records, token max-pooling, and the on-disk dump
//! and decoder formats.
//!
//! Activations are non-negative; zeros are never stored. Values are kept as
//! `f32` because that is what the dump stores, so a read/write cycle is
//! bit-exact.

pub(crate) mod decoder;
mod dump;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};

pub use decoder::{decoder_path, read_decoder, read_decoders, write_decoder, DecoderMatrix};
pub use dump::{
    read_dump, read_dump_all, write_dump, DumpManifest, DumpReader, DumpWriter, MANIFEST_FILE,
    RECORDS_FILE,
};

/// One SAE dictionary element, written `layer:index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub layer: u32,
    pub index: u32,
}

impl FeatureId {
    pub const fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.index)
    }
}

impl FromStr for FeatureId {
    type Err = CueError;

    fn from_str(s: &str) -> Result<Self> {
        let (l, i) = s
            .split_once(':')
            .ok_or_else(|| CueError::invalid(format!("feature id {s:?} is not layer:index")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| CueError::invalid(format!("feature id {s:?} is not layer:index")))
        };
        Ok(Self::new(parse(l)?, parse(i)?))
    }
}

/// Sparse activations of one layer: strictly increasing indices, positive
/// finite values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations {
    entries: Vec<(u32, f32)>,
}

impl LayerActivations {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates already-sparse entries.
    pub fn from_entries(entries: Vec<(u32, f32)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(CueError::invalid(format!(
                    "sparse indices not strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(i, v)) = entries.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(CueError::invalid(format!(
                "sparse value at index {i} must be positive and finite, got {v}"
            )));
        }
        Ok(Self { entries })
    }

    /// Sparsifies a dense vector. Negative values are clamped to zero and
    /// dropped along with exact zeros.
    pub fn from_dense(values: &[f32]) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(CueError::Numeric(format!(
                    "non-finite activation at index {i}"
                )));
            }
            if v > 0.0 {
                entries.push((i as u32, v));
            }
        }
        Ok(Self { entries })
    }

    pub fn to_dense(&self, width: usize) -> Vec<f32> {
        let mut out = vec![0.0; width];
        for &(i, v) in &self.entries {
            if let Some(slot) = out.get_mut(i as usize) {
                *slot = v;
            }
        }
        out
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Value at `index`, zero if absent.
    pub fn get(&self, index: u32) -> f32 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |pos| self.entries[pos].1)
    }

    pub fn max_index(&self) -> Option<u32> {
        self.entries.last().map(|&(i, _)| i)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| f64::from(v)).sum()
    }
}

/// Per-feature maximum over token positions.
///
/// Every token vector must have indices below `width`. The result omits
/// features whose maximum is zero.
pub fn max_pool_tokens(tokens: &[LayerActivations], width: usize) -> Result<LayerActivations> {
    if tokens.is_empty() {
        return Err(CueError::invalid("cannot max-pool an empty token list"));
    }
    let mut pooled: BTreeMap<u32, f32> = BTreeMap::new();
    for tok in tokens {
        if let Some(max) = tok.max_index() {
            if max as usize >= width {
                return Err(CueError::Dim {
                    expected: width,
                    got: max as usize + 1,
                    context: "token activation width",
                });
            }
        }
        for &(i, v) in &tok.entries {
            let slot = pooled.entry(i).or_insert(0.0);
            if v > *slot {
                *slot = v;
            }
        }
    }
    Ok(LayerActivations {
        entries: pooled.into_iter().collect(),
    })
}

/// Max-pools dense per-token rows (all the same width).
pub fn max_pool_dense(tokens: &[Vec<f32>]) -> Result<LayerActivations> {
    let first = tokens
        .first()
        .ok_or_else(|| CueError::invalid("cannot max-pool an empty token list"))?;
    let width = first.len();
    let mut pooled = vec![0.0f32; width];
    for row in tokens {
        if row.len() != width {
            return Err(CueError::Dim {
                expected: width,
                got: row.len(),
                context: "token activation width",
            });
        }
        for (p, &v) in pooled.iter_mut().zip(row) {
            if v > *p {
                *p = v;
            }
        }
    }
    LayerActivations::from_dense(&pooled)
}

/// Max-pooled sparse activations of one assertion across layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub assertion_id: String,
    pub label: String,
    pub per_layer: BTreeMap<u32, LayerActivations>,
}

impl ActivationRecord {
    pub fn new(assertion_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            assertion_id: assertion_id.into(),
            label: label.into(),
            per_layer: BTreeMap::new(),
        }
    }

    pub fn with_layer(mut self, layer: u32, acts: LayerActivations) -> Self {
        self.per_layer.insert(layer, acts);
        self
    }

    /// Activation of `feature`, or `None` when its layer is absent.
    pub fn get(&self, feature: FeatureId) -> Option<f32> {
        self.per_layer
            .get(&feature.layer)
            .map(|l| l.get(feature.index))
    }

    /// Iterates every stored `(feature, value)` pair in feature order.
    pub fn iter_features(&self) -> impl Iterator<Item = (FeatureId, f32)> + '_ {
        self.per_layer.iter().flat_map(|(&layer, acts)| {
            acts.entries()
                .iter()
                .map(move |&(i, v)| (FeatureId::new(layer, i), v))
        })
    }
}
