// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ground-truth assignment of synthetic features to synthetic cultures.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::activations::FeatureId;
use crate::error::{CueError, Result};

const NAMES: [&str; 4] = ["north", "south", "east", "west"];

/// Features shared by a group of related labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedGroup {
    pub labels: Vec<String>,
    pub features: Vec<FeatureId>,
}

/// Inclusive range of firing strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthRange {
    pub min: f64,
    pub max: f64,
}

/// Which features fire for which label in the synthetic oracle.
///
/// Every dictionary feature not listed here is a noise feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub labels: Vec<String>,
    pub planted: BTreeMap<String, Vec<FeatureId>>,
    #[serde(default)]
    pub shared: Vec<SharedGroup>,
    #[serde(default)]
    pub universal: Vec<FeatureId>,
    pub noise_rate: f64,
    pub firing_strength: StrengthRange,
}

/// Shape of a [`PlantedSpec::layout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_labels: usize,
    pub planted_per_label: usize,
    /// Size of the single shared group's feature set (group = first and
    /// third label); 0 for none.
    pub shared: usize,
    pub universal: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            n_labels: 4,
            planted_per_label: 8,
            shared: 2,
            universal: 16,
        }
    }
}

pub fn label_name(i: usize, n: usize) -> String {
    if n <= NAMES.len() {
        NAMES[i].to_owned()
    } else {
        format!("culture_{i:02}")
    }
}

impl PlantedSpec {
    /// Lays features out consecutively in dictionary index order: planted
    /// blocks per label, then shared, then universal. The k-th feature of
    /// each block lives in layer `k % n_layers`.
    pub fn layout(layout: Layout, n_layers: u32, noise_rate: f64) -> Result<Self> {
        if layout.n_labels < 2 {
            return Err(CueError::invalid("planted spec needs at least two labels"));
        }
        if n_layers == 0 {
            return Err(CueError::invalid("planted spec needs at least one layer"));
        }
        let mut next = 0u32;
        let mut take = |count: usize| -> Vec<FeatureId> {
            (0..count)
                .map(|k| {
                    let f = FeatureId::new(k as u32 % n_layers, next);
                    next += 1;
                    f
                })
                .collect()
        };
        let labels: Vec<String> = (0..layout.n_labels)
            .map(|i| label_name(i, layout.n_labels))
            .collect();
        let planted = labels
            .iter()
            .map(|l| (l.clone(), take(layout.planted_per_label)))
            .collect();
        let shared = if layout.shared > 0 && layout.n_labels >= 3 {
            vec![SharedGroup {
                labels: vec![labels[0].clone(), labels[2].clone()],
                features: take(layout.shared),
            }]
        } else {
            Vec::new()
        };
        let universal = take(layout.universal);
        let spec = Self {
            labels,
            planted,
            shared,
            universal,
            noise_rate,
            firing_strength: StrengthRange { min: 1.0, max: 2.0 },
        };
        spec.validate(n_layers, u32::MAX)?;
        Ok(spec)
    }

    pub fn validate(&self, n_layers: u32, d_sae: u32) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(CueError::invalid("noise_rate must be in [0, 1)"));
        }
        let s = self.firing_strength;
        if !(s.min > 0.0 && s.max >= s.min && s.max.is_finite()) {
            return Err(CueError::invalid("firing strength range must be positive"));
        }
        let known: BTreeSet<&str> = self.labels.iter().map(String::as_str).collect();
        if known.len() != self.labels.len() || known.len() < 2 {
            return Err(CueError::invalid(
                "labels must be distinct and at least two",
            ));
        }
        let mut seen: BTreeSet<FeatureId> = BTreeSet::new();
        let mut claim = |f: &FeatureId, what: &str| -> Result<()> {
            if f.layer >= n_layers || f.index >= d_sae {
                return Err(CueError::invalid(format!(
                    "{what} feature {f} outside the dictionary"
                )));
            }
            if !seen.insert(*f) {
                return Err(CueError::invalid(format!("feature {f} assigned twice")));
            }
            Ok(())
        };
        for (label, feats) in &self.planted {
            if !known.contains(label.as_str()) {
                return Err(CueError::UnknownLabel(label.clone()));
            }
            for f in feats {
                claim(f, "planted")?;
            }
        }
        for g in &self.shared {
            if let Some(l) = g.labels.iter().find(|l| !known.contains(l.as_str())) {
                return Err(CueError::UnknownLabel(l.clone()));
            }
            for f in &g.features {
                claim(f, "shared")?;
            }
        }
        for f in &self.universal {
            claim(f, "universal")?;
        }
        Ok(())
    }

    pub fn planted_for(&self, label: &str) -> &[FeatureId] {
        self.planted.get(label).map_or(&[], Vec::as_slice)
    }

    /// Shared features of every group containing `label`.
    pub fn shared_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = FeatureId> + 'a {
        self.shared
            .iter()
            .filter(move |g| g.labels.iter().any(|l| l == label))
            .flat_map(|g| g.features.iter().copied())
    }

    pub fn all_planted(&self) -> BTreeSet<FeatureId> {
        self.planted.values().flatten().copied().collect()
    }

    pub fn all_shared(&self) -> BTreeSet<FeatureId> {
        self.shared
            .iter()
            .flat_map(|g| g.features.iter().copied())
            .collect()
    }

    /// Planted, shared and universal features.
    pub fn structured(&self) -> BTreeSet<FeatureId> {
        let mut s = self.all_planted();
        s.extend(self.all_shared());
        s.extend(self.universal.iter().copied());
        s
    }

    pub fn is_noise(&self, f: FeatureId) -> bool {
        !self.structured().contains(&f)
    }

    /// Features that fire deterministically for a label.
    pub fn firing_for(&self, label: &str) -> BTreeSet<FeatureId> {
        let mut s: BTreeSet<FeatureId> = self.planted_for(label).iter().copied().collect();
        s.extend(self.shared_for(label));
        s.extend(self.universal.iter().copied());
        s
    }
}
