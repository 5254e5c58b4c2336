// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mutual-information feature scoring and cumulative-mass selection.
//!
//! Each feature's activation is discretized ([`QuantizationScheme`]) and
//! scored with the plug-in estimator of `I(A; C)` in bits. Features are
//! ranked by descending MI, ties broken by ascending `(layer, index)`, and
//! the selected set is the shortest ranked prefix whose cumulative MI
//! reaches `rho` times the total.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activations::{ActivationRecord, FeatureId};
use crate::error::{CueError, Result};

/// Default cumulative-MI fraction.
pub const DEFAULT_RHO: f64 = 0.1;

/// How a feature's activation is binned before MI estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantizationScheme {
    /// `value > threshold` maps to bin 1, everything else to bin 0.
    Binary { threshold: f64 },
    /// Bin 0 holds exact zeros; nonzero values fall into `bins` bins cut at
    /// the `k / bins` quantiles (linear interpolation) of the nonzero values.
    Quantile { bins: usize },
}

impl Default for QuantizationScheme {
    fn default() -> Self {
        Self::Binary { threshold: 0.0 }
    }
}

impl QuantizationScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Binary { threshold } if !threshold.is_finite() => {
                Err(CueError::invalid("binary threshold must be finite"))
            }
            Self::Quantile { bins } if bins < 2 => {
                Err(CueError::invalid("quantile scheme needs at least 2 bins"))
            }
            _ => Ok(()),
        }
    }

    /// Parses `binary`, `binary:<threshold>` or `quantile:<bins>`.
    pub fn parse(s: &str) -> Result<Self> {
        let scheme = match s.split_once(':') {
            None if s == "binary" => Self::default(),
            None if s == "quantile" => Self::Quantile { bins: 4 },
            Some(("binary", t)) => Self::Binary {
                threshold: t
                    .parse()
                    .map_err(|_| CueError::invalid(format!("bad threshold in {s:?}")))?,
            },
            Some(("quantile", k)) => Self::Quantile {
                bins: k
                    .parse()
                    .map_err(|_| CueError::invalid(format!("bad bin count in {s:?}")))?,
            },
            _ => return Err(CueError::invalid(format!("unknown scheme {s:?}"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }

    fn cut_points(&self, values: &[f64]) -> Vec<f64> {
        let Self::Quantile { bins } = *self else {
            return Vec::new();
        };
        let mut nz: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
        if nz.is_empty() {
            return Vec::new();
        }
        nz.sort_by(f64::total_cmp);
        let last = (nz.len() - 1) as f64;
        (1..bins)
            .map(|k| {
                let h = last * k as f64 / bins as f64;
                let lo = h.floor() as usize;
                let hi = h.ceil() as usize;
                nz[lo] + (h - lo as f64) * (nz[hi] - nz[lo])
            })
            .collect()
    }

    fn bin_of(&self, v: f64, cuts: &[f64]) -> usize {
        match *self {
            Self::Binary { threshold } => usize::from(v > threshold),
            Self::Quantile { .. } if v == 0.0 => 0,
            Self::Quantile { .. } => 1 + cuts.iter().filter(|&&c| v > c).count(),
        }
    }
}

/// Bins a feature's values across samples.
pub fn quantize(values: &[f64], scheme: &QuantizationScheme) -> Vec<usize> {
    let cuts = scheme.cut_points(values);
    values.iter().map(|&v| scheme.bin_of(v, &cuts)).collect()
}

/// Joint (bin, label) counts.
#[derive(Debug, Default, Clone)]
struct JointCounts {
    cells: HashMap<(usize, usize), u64>,
}

impl JointCounts {
    fn add(&mut self, bin: usize, label: usize, n: u64) {
        if n > 0 {
            *self.cells.entry((bin, label)).or_insert(0) += n;
        }
    }

    /// Plug-in MI in bits. Terms are summed in sorted order so that tables
    /// equal up to a relabeling produce bit-identical results.
    fn mutual_information(&self) -> f64 {
        let mut n = 0u64;
        let mut by_bin: HashMap<usize, u64> = HashMap::new();
        let mut by_label: HashMap<usize, u64> = HashMap::new();
        for (&(a, c), &k) in &self.cells {
            n += k;
            *by_bin.entry(a).or_insert(0) += k;
            *by_label.entry(c).or_insert(0) += k;
        }
        if by_bin.len() < 2 || by_label.len() < 2 {
            return 0.0;
        }
        let nf = n as f64;
        let mut terms: Vec<f64> = self
            .cells
            .iter()
            .map(|(&(a, c), &k)| {
                let kf = k as f64;
                let ratio = (kf * nf) / (by_bin[&a] as f64 * by_label[&c] as f64);
                kf / nf * ratio.log2()
            })
            .collect();
        terms.sort_by(f64::total_cmp);
        terms.iter().sum::<f64>().max(0.0)
    }
}

/// Plug-in estimate of `I(A; C)` in bits from paired samples.
///
/// Returns exactly 0 when either variable is constant.
pub fn mutual_information(bins: &[usize], labels: &[usize]) -> Result<f64> {
    if bins.len() != labels.len() {
        return Err(CueError::Dim {
            expected: bins.len(),
            got: labels.len(),
            context: "mutual information label count",
        });
    }
    if bins.is_empty() {
        return Err(CueError::invalid(
            "mutual information needs at least one sample",
        ));
    }
    let mut t = JointCounts::default();
    for (&a, &c) in bins.iter().zip(labels) {
        t.add(a, c, 1);
    }
    Ok(t.mutual_information())
}

/// Maps labels to dense ids in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelIndex {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl LabelIndex {
    pub fn from_records(records: &[ActivationRecord]) -> Self {
        let mut idx = Self::default();
        for r in records {
            idx.intern(&r.label);
        }
        idx
    }

    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.names.len();
        self.names.push(label.to_owned());
        self.ids.insert(label.to_owned(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// MI of one feature with the label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiScore {
    #[serde(flatten)]
    pub feature: FeatureId,
    pub bits: f64,
}

/// Scores every feature that is active in at least one record.
///
/// Features never active anywhere are constant and score 0 bits; they are
/// left out of the output. Absent activations count as exact zeros.
pub fn score_features(
    records: &[ActivationRecord],
    scheme: &QuantizationScheme,
) -> Result<Vec<MiScore>> {
    scheme.validate()?;
    if records.is_empty() {
        return Err(CueError::invalid("cannot score features over zero records"));
    }
    let labels = LabelIndex::from_records(records);
    let label_of: Vec<usize> = records
        .iter()
        .map(|r| labels.id(&r.label).expect("interned"))
        .collect();
    let mut label_totals = vec![0u64; labels.len()];
    for &c in &label_of {
        label_totals[c] += 1;
    }

    let mut columns: BTreeMap<FeatureId, Vec<(usize, f64)>> = BTreeMap::new();
    for (row, r) in records.iter().enumerate() {
        for (f, v) in r.iter_features() {
            columns.entry(f).or_default().push((row, f64::from(v)));
        }
    }

    let zero_bin = quantize(&[0.0], scheme)[0];
    let columns: Vec<(FeatureId, Vec<(usize, f64)>)> = columns.into_iter().collect();
    let scores = columns
        .par_iter()
        .map(|(feature, entries)| {
            let values: Vec<f64> = entries.iter().map(|&(_, v)| v).collect();
            // Quantile cut points only depend on the nonzero values.
            let cuts = scheme.cut_points(&values);
            let mut table = JointCounts::default();
            let mut active_per_label = vec![0u64; label_totals.len()];
            for &(row, v) in entries {
                let c = label_of[row];
                table.add(scheme.bin_of(v, &cuts), c, 1);
                active_per_label[c] += 1;
            }
            for (c, (&total, &active)) in label_totals.iter().zip(&active_per_label).enumerate() {
                table.add(zero_bin, c, total - active);
            }
            MiScore {
                feature: *feature,
                bits: table.mutual_information(),
            }
        })
        .collect();
    Ok(scores)
}

/// Ranked scores and the selected prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub rho: f64,
    pub total_bits: f64,
    pub selected: Vec<MiScore>,
    pub ranked: Vec<MiScore>,
}

/// Sorts by descending bits, then ascending `(layer, index)`.
pub fn rank_scores(mut scores: Vec<MiScore>) -> Vec<MiScore> {
    scores.sort_by(|a, b| b.bits.total_cmp(&a.bits).then(a.feature.cmp(&b.feature)));
    scores
}

/// Selects the shortest ranked prefix with cumulative MI `>= rho * total`.
pub fn select_features(scores: Vec<MiScore>, rho: f64) -> Result<SelectionResult> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(CueError::invalid(format!(
            "rho must be in (0, 1], got {rho}"
        )));
    }
    if let Some(s) = scores
        .iter()
        .find(|s| !(s.bits.is_finite() && s.bits >= 0.0))
    {
        return Err(CueError::Numeric(format!(
            "feature {} has invalid MI {}",
            s.feature, s.bits
        )));
    }
    let ranked = rank_scores(scores);
    let total_bits: f64 = ranked.iter().map(|s| s.bits).sum();
    if total_bits <= 0.0 {
        return Err(CueError::NoInformativeFeatures);
    }
    let cut = rho * total_bits;
    let mut cumulative = 0.0;
    let mut take = 0;
    for s in &ranked {
        cumulative += s.bits;
        take += 1;
        if cumulative >= cut {
            break;
        }
    }
    Ok(SelectionResult {
        rho,
        total_bits,
        selected: ranked[..take].to_vec(),
        ranked,
    })
}

impl SelectionResult {
    pub fn features(&self) -> Vec<FeatureId> {
        self.selected.iter().map(|s| s.feature).collect()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Re-cuts the same ranking at a different `rho`.
    pub fn reselect(&self, rho: f64) -> Result<Self> {
        select_features(self.ranked.clone(), rho)
    }

    /// Number of selected features per layer.
    pub fn layer_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.selected {
            *counts.entry(s.feature.layer).or_insert(0) += 1;
        }
        counts
    }

    /// Selected positions grouped by layer: `layer -> [(position in S, index)]`.
    pub fn by_layer(&self) -> BTreeMap<u32, Vec<(usize, u32)>> {
        let mut out: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
        for (pos, s) in self.selected.iter().enumerate() {
            out.entry(s.feature.layer)
                .or_default()
                .push((pos, s.feature.index));
        }
        out
    }

    /// Hex SHA-256 over the selected feature list, identifying `S`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.selected {
            h.update(s.feature.layer.to_le_bytes());
            h.update(s.feature.index.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CueError::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CueError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(CueError::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CueError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CueError::json(path, e))
    }
}

/// Per-layer selected-feature counts of two selections side by side, for
/// comparing runs over different corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCountRow {
    pub layer: u32,
    pub left: usize,
    pub right: usize,
}

pub fn compare_layer_distribution(
    left: &SelectionResult,
    right: &SelectionResult,
) -> Vec<LayerCountRow> {
    let l = left.layer_counts();
    let r = right.layer_counts();
    let mut layers: Vec<u32> = l.keys().chain(r.keys()).copied().collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|layer| LayerCountRow {
            layer,
            left: l.get(&layer).copied().unwrap_or(0),
            right: r.get(&layer).copied().unwrap_or(0),
        })
        .collect()
}

/// CSV of [`compare_layer_distribution`] with the given column names.
pub fn layer_distribution_csv(rows: &[LayerCountRow], left_name: &str, right_name: &str) -> String {
    let mut out = format!("layer,{left_name},{right_name}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer, r.left, r.right));
    }
    out
}
