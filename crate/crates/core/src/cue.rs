// SPDX-License-Identifier: MIT OR Apache-2.0

//! CuE vectors, per-culture prototypes and cosine bias diagnosis.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationRecord;
use crate::error::{CueError, Result};
use crate::selection::SelectionResult;

/// Norms at or below this (relative to the prototype scale) count as zero.
const ZERO_NORM: f64 = 1e-12;
/// Cosines closer than this are an argmax tie.
const TIE_EPS: f64 = 1e-12;

/// A record's activations restricted to the selected features, in
/// selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CueVector(pub Vec<f64>);

impl CueVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Projects a record onto the selected feature set.
pub fn cue_project(record: &ActivationRecord, selection: &SelectionResult) -> Result<CueVector> {
    selection
        .selected
        .iter()
        .map(|s| {
            record.get(s.feature).map(f64::from).ok_or_else(|| {
                CueError::Mismatch(format!(
                    "record {:?} has no layer {} needed by feature {}",
                    record.assertion_id, s.feature.layer, s.feature
                ))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(CueVector)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, 0 when either side is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64], zero_norm: f64) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na <= zero_norm || nb <= zero_norm {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Raw and centered per-label prototypes over a fixed feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// Row order of every matrix below.
    pub labels: Vec<String>,
    /// Records contributing to each prototype.
    pub counts: Vec<usize>,
    /// Mean CuE vector per label.
    pub prototypes: Vec<Vec<f64>>,
    /// Unweighted mean of the prototype rows.
    pub global_mean: Vec<f64>,
    /// `prototypes - global_mean`.
    pub centered: Vec<Vec<f64>>,
    /// Fingerprint of the selection the columns refer to.
    pub selection: String,
}

/// Averages CuE vectors per label. Labels are ordered by first appearance.
pub fn build_prototypes<'a, I>(records: I, selection: &SelectionResult) -> Result<PrototypeSet>
where
    I: IntoIterator<Item = &'a ActivationRecord>,
{
    let dim = selection.len();
    let mut labels: Vec<String> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let v = cue_project(r, selection)?;
        let row = *index.entry(r.label.clone()).or_insert_with(|| {
            labels.push(r.label.clone());
            sums.push(vec![0.0; dim]);
            counts.push(0);
            labels.len() - 1
        });
        for (s, x) in sums[row].iter_mut().zip(&v.0) {
            *s += x;
        }
        counts[row] += 1;
    }
    if labels.is_empty() {
        return Err(CueError::invalid(
            "cannot build prototypes from zero records",
        ));
    }
    let prototypes: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect();
    Ok(PrototypeSet::from_prototypes(
        labels,
        counts,
        prototypes,
        selection.fingerprint(),
    ))
}

impl PrototypeSet {
    /// Derives the global mean and centered rows from raw prototypes.
    pub fn from_prototypes(
        labels: Vec<String>,
        counts: Vec<usize>,
        prototypes: Vec<Vec<f64>>,
        selection: String,
    ) -> Self {
        let k = prototypes.len() as f64;
        let dim = prototypes.first().map_or(0, Vec::len);
        let mut global_mean = vec![0.0; dim];
        for p in &prototypes {
            for (g, x) in global_mean.iter_mut().zip(p) {
                *g += x;
            }
        }
        global_mean.iter_mut().for_each(|g| *g /= k);
        let centered = prototypes
            .iter()
            .map(|p| p.iter().zip(&global_mean).map(|(x, g)| x - g).collect())
            .collect();
        Self {
            labels,
            counts,
            prototypes,
            global_mean,
            centered,
            selection,
        }
    }

    pub fn dim(&self) -> usize {
        self.global_mean.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn zero_norm(&self) -> f64 {
        ZERO_NORM * norm(&self.global_mean).max(1.0)
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

/// Cosine of a centered response against every centered prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScores {
    /// One cosine per label, in prototype order.
    pub cosines: Vec<f64>,
    pub argmax: String,
    /// Set when several labels share the maximum; `argmax` is then the
    /// lexicographically smallest of them.
    pub tie: bool,
}

impl BiasScores {
    pub fn get(&self, protos: &PrototypeSet, label: &str) -> Option<f64> {
        protos.label_index(label).map(|i| self.cosines[i])
    }
}

/// Scores a response's CuE vector against the prototypes.
pub fn bias_score(response: &CueVector, protos: &PrototypeSet) -> Result<BiasScores> {
    if response.len() != protos.dim() {
        return Err(CueError::Dim {
            expected: protos.dim(),
            got: response.len(),
            context: "response CuE length",
        });
    }
    let centered: Vec<f64> = response
        .0
        .iter()
        .zip(&protos.global_mean)
        .map(|(x, g)| x - g)
        .collect();
    let eps = protos.zero_norm();
    let cosines: Vec<f64> = protos
        .centered
        .iter()
        .map(|p| cosine(&centered, p, eps))
        .collect();
    let best = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&String> = protos
        .labels
        .iter()
        .zip(&cosines)
        .filter(|(_, &c)| best - c <= TIE_EPS)
        .map(|(l, _)| l)
        .collect();
    let argmax = tied.iter().min().map(|l| (*l).clone()).unwrap_or_default();
    Ok(BiasScores {
        cosines,
        argmax,
        tie: tied.len() > 1,
    })
}

/// Total-variation distance between `shares` and the uniform distribution
/// over the same labels. Ranges from 0 (uniform) to `1 - 1/k`.
pub fn concentration_index(shares: &[f64]) -> Result<f64> {
    if shares.is_empty() {
        return Err(CueError::invalid("no shares"));
    }
    if shares.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(CueError::invalid("shares must be finite and non-negative"));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CueError::invalid(format!("shares sum to {total}, not 1")));
    }
    let uniform = 1.0 / shares.len() as f64;
    Ok(0.5 * shares.iter().map(|s| (s - uniform).abs()).sum::<f64>())
}

/// Bias diagnosis of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBias {
    pub response_id: String,
    #[serde(flatten)]
    pub scores: BiasScores,
}

/// Bias diagnosis of a response set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub labels: Vec<String>,
    pub per_response: Vec<ResponseBias>,
    /// Fraction of responses whose argmax is each label, in label order.
    pub shares: Vec<f64>,
    pub concentration: f64,
}

impl BiasReport {
    pub fn build<'a, I>(responses: I, protos: &PrototypeSet) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a CueVector)>,
    {
        let mut per_response = Vec::new();
        let mut hits = vec![0usize; protos.labels.len()];
        for (id, cue) in responses {
            let scores = bias_score(cue, protos)?;
            let idx = protos
                .label_index(&scores.argmax)
                .expect("argmax is a label");
            hits[idx] += 1;
            per_response.push(ResponseBias {
                response_id: id.to_owned(),
                scores,
            });
        }
        let n = per_response.len();
        let (shares, concentration) = if n == 0 {
            (vec![0.0; hits.len()], 0.0)
        } else {
            let shares: Vec<f64> = hits.iter().map(|&h| h as f64 / n as f64).collect();
            let c = concentration_index(&shares)?;
            (shares, c)
        };
        Ok(Self {
            labels: protos.labels.clone(),
            per_response,
            shares,
            concentration,
        })
    }

    pub fn share_of(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.shares[i])
    }

    /// Response x label cosine matrix as CSV.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("response_id");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push_str(",argmax,tie\n");
        for r in &self.per_response {
            out.push_str(&csv_field(&r.response_id));
            for c in &r.scores.cosines {
                out.push_str(&format!(",{c:.6}"));
            }
            out.push_str(&format!(
                ",{},{}\n",
                csv_field(&r.scores.argmax),
                r.scores.tie
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CueError::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CueError::io(path, e))
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
