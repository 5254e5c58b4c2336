// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-space steering directions, their decoding into residual-stream
//! vectors, the additive intervention, and steering-strength selection.
//!
//! A direction is the target prototype minus the mean of the other raw
//! prototypes. It is scattered into each layer's SAE feature space and
//! mapped through that layer's decoder (`v = W_dec^T delta`). At inference
//! the residual `h` of a hooked layer becomes `h + alpha * v`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::{decoder, DecoderMatrix};
use crate::cue::{norm, PrototypeSet};
use crate::error::{CueError, Result};
use crate::selection::SelectionResult;

/// Steering strengths swept by default.
pub const DEFAULT_ALPHAS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
/// Minimum mean fluency for an alpha to be eligible.
pub const DEFAULT_FLUENCY_FLOOR: f64 = 5.0;

/// Feature-space direction toward one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringDirection {
    pub target: String,
    pub delta: Vec<f64>,
}

/// `p(target) - mean_{c != target} p(c)` over raw prototypes.
pub fn steering_delta(protos: &PrototypeSet, target: &str) -> Result<SteeringDirection> {
    let t = protos
        .label_index(target)
        .ok_or_else(|| CueError::UnknownLabel(target.to_owned()))?;
    let k = protos.labels.len();
    if k < 2 {
        return Err(CueError::invalid("steering needs at least two labels"));
    }
    let mut others = vec![0.0; protos.dim()];
    for (c, p) in protos.prototypes.iter().enumerate() {
        if c != t {
            for (o, x) in others.iter_mut().zip(p) {
                *o += x;
            }
        }
    }
    let delta = protos.prototypes[t]
        .iter()
        .zip(&others)
        .map(|(x, o)| x - o / (k - 1) as f64)
        .collect();
    Ok(SteeringDirection {
        target: target.to_owned(),
        delta,
    })
}

/// Which layers receive an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSubset {
    /// Every layer owning at least one selected feature.
    #[default]
    All,
    /// Only layers divisible by the stride (0, k, 2k, ...).
    Stride { every: u32 },
}

impl LayerSubset {
    pub fn from_stride(every: u32) -> Result<Self> {
        match every {
            0 => Err(CueError::invalid("layer stride must be positive")),
            1 => Ok(Self::All),
            every => Ok(Self::Stride { every }),
        }
    }

    pub fn contains(&self, layer: u32) -> bool {
        match *self {
            Self::All => true,
            Self::Stride { every } => layer.is_multiple_of(every),
        }
    }
}

/// Decoding options.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SteeringOptions {
    pub layers: LayerSubset,
    /// Rescale the concatenated per-layer vectors to unit L2 norm.
    pub normalize: bool,
}

/// Dense residual-space steering vectors per layer with a global strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVectorSet {
    pub target: String,
    pub alpha: f64,
    /// Fingerprint of the selection the direction was built over.
    pub selection: String,
    pub normalized: bool,
    pub per_layer: BTreeMap<u32, Vec<f64>>,
}

/// Decodes a feature-space direction into per-layer residual vectors.
///
/// Layers without selected features, or excluded by the layer subset, are
/// omitted. The resulting set has `alpha = 1`.
pub fn decode_delta(
    direction: &SteeringDirection,
    selection: &SelectionResult,
    decoders: &BTreeMap<u32, DecoderMatrix>,
    options: &SteeringOptions,
) -> Result<SteeringVectorSet> {
    if direction.delta.len() != selection.len() {
        return Err(CueError::Dim {
            expected: selection.len(),
            got: direction.delta.len(),
            context: "steering delta length",
        });
    }
    if direction.delta.iter().any(|d| !d.is_finite()) {
        return Err(CueError::Numeric("steering delta is not finite".into()));
    }
    let mut per_layer = BTreeMap::new();
    for (layer, members) in selection.by_layer() {
        if !options.layers.contains(layer) {
            continue;
        }
        let dec = decoders.get(&layer).ok_or_else(|| {
            CueError::Mismatch(format!(
                "no decoder for layer {layer}, which owns selected features"
            ))
        })?;
        let sparse: Vec<(usize, f64)> = members
            .iter()
            .map(|&(pos, index)| (index as usize, direction.delta[pos]))
            .collect();
        per_layer.insert(layer, dec.transpose_mul_sparse(&sparse)?);
    }
    if options.normalize {
        let total = per_layer
            .values()
            .map(|v| norm(v).powi(2))
            .sum::<f64>()
            .sqrt();
        if total > 0.0 {
            per_layer
                .values_mut()
                .for_each(|v| v.iter_mut().for_each(|x| *x /= total));
        }
    }
    Ok(SteeringVectorSet {
        target: direction.target.clone(),
        alpha: 1.0,
        selection: selection.fingerprint(),
        normalized: options.normalize,
        per_layer,
    })
}

const HEADER_FILE: &str = "steering.json";

#[derive(Serialize, Deserialize)]
struct SetHeader {
    format: String,
    target: String,
    alpha: f64,
    selection: String,
    normalized: bool,
    layers: Vec<u32>,
    d_model: Vec<usize>,
}

impl SteeringVectorSet {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = u32> + '_ {
        self.per_layer.keys().copied()
    }

    /// True when every vector is exactly zero or alpha is zero.
    pub fn is_noop(&self) -> bool {
        self.alpha == 0.0 || self.per_layer.values().all(|v| v.iter().all(|&x| x == 0.0))
    }

    /// Adds `alpha * v[layer]` to `h` in place. Layers outside the set are
    /// left untouched.
    pub fn apply_in_place(&self, h: &mut [f64], layer: u32) -> Result<()> {
        let Some(v) = self.per_layer.get(&layer) else {
            return Ok(());
        };
        if v.len() != h.len() {
            return Err(CueError::Dim {
                expected: v.len(),
                got: h.len(),
                context: "residual width at steered layer",
            });
        }
        for (x, d) in h.iter_mut().zip(v) {
            *x += self.alpha * d;
        }
        Ok(())
    }

    /// Writes `steering.json` plus one `steering_L{layer}.bin` per layer
    /// (decoder format, one row) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CueError::io(dir, e))?;
        let header = SetHeader {
            format: "cuekit-steering".into(),
            target: self.target.clone(),
            alpha: self.alpha,
            selection: self.selection.clone(),
            normalized: self.normalized,
            layers: self.per_layer.keys().copied().collect(),
            d_model: self.per_layer.values().map(Vec::len).collect(),
        };
        let path = dir.join(HEADER_FILE);
        let mut text =
            serde_json::to_string_pretty(&header).map_err(|e| CueError::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CueError::io(&path, e))?;
        for (&layer, v) in &self.per_layer {
            let m = DecoderMatrix::new(layer, 1, v.len(), v.clone())?;
            decoder::write_decoder(layer_path(dir, layer), &m)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(HEADER_FILE);
        if !path.exists() {
            return Err(CueError::MissingInput(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| CueError::io(&path, e))?;
        let h: SetHeader = serde_json::from_str(&text).map_err(|e| CueError::json(&path, e))?;
        if h.layers.len() != h.d_model.len() {
            return Err(CueError::Mismatch(
                "steering header layer/d_model lengths differ".into(),
            ));
        }
        let mut per_layer = BTreeMap::new();
        for (&layer, &d) in h.layers.iter().zip(&h.d_model) {
            let m = decoder::read_decoder(layer_path(dir, layer))?;
            if m.layer != layer || m.rows() != 1 || m.cols() != d {
                return Err(CueError::Mismatch(format!(
                    "steering_L{layer}.bin does not match its header"
                )));
            }
            per_layer.insert(layer, m.values().to_vec());
        }
        Ok(Self {
            target: h.target,
            alpha: h.alpha,
            selection: h.selection,
            normalized: h.normalized,
            per_layer,
        })
    }
}

fn layer_path(dir: &Path, layer: u32) -> std::path::PathBuf {
    dir.join(format!("steering_L{layer}.bin"))
}

/// Returns `h + alpha * v[layer]`; layers outside the set pass through.
pub fn apply_steering(h: &[f64], layer: u32, set: &SteeringVectorSet) -> Result<Vec<f64>> {
    let mut out = h.to_vec();
    set.apply_in_place(&mut out, layer)?;
    Ok(out)
}

/// Candidate strengths and the fluency floor for automatic selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPolicy {
    pub candidates: Vec<f64>,
    pub fluency_floor: f64,
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_ALPHAS.to_vec(),
            fluency_floor: DEFAULT_FLUENCY_FLOOR,
        }
    }
}

impl AlphaPolicy {
    pub fn new(candidates: Vec<f64>, fluency_floor: f64) -> Result<Self> {
        let p = Self {
            candidates,
            fluency_floor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(CueError::invalid("alpha policy has no candidates"));
        }
        if self.candidates.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(CueError::invalid("alpha candidates must be positive"));
        }
        if self.candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CueError::invalid(
                "alpha candidates must be strictly increasing",
            ));
        }
        Ok(())
    }
}

/// Mean judged scores of steered generations at one strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaScore {
    pub cultural: f64,
    pub fluency: f64,
}

/// Smallest candidate whose cultural score beats the explicit-prompt
/// baseline while fluency stays at or above the floor.
pub fn select_alpha(
    table: &[(f64, AlphaScore)],
    explicit_baseline: f64,
    policy: &AlphaPolicy,
) -> Result<Option<f64>> {
    policy.validate()?;
    if table.is_empty() {
        return Err(CueError::invalid("empty alpha score table"));
    }
    if let Some((a, _)) = table.iter().find(|(a, _)| !policy.candidates.contains(a)) {
        return Err(CueError::invalid(format!(
            "alpha {a} is not a policy candidate"
        )));
    }
    let mut rows: Vec<&(f64, AlphaScore)> = table.iter().collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(rows
        .into_iter()
        .find(|(_, s)| s.cultural > explicit_baseline && s.fluency >= policy.fluency_floor)
        .map(|(a, _)| *a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::FeatureId;
    use crate::selection::{select_features, MiScore};

    fn protos(rows: Vec<Vec<f64>>) -> PrototypeSet {
        let labels = (0..rows.len()).map(|i| format!("L{i}")).collect();
        let counts = vec![1; rows.len()];
        PrototypeSet::from_prototypes(labels, counts, rows, String::new())
    }

    fn selection(features: &[(u32, u32)]) -> SelectionResult {
        let scores = features
            .iter()
            .enumerate()
            .map(|(k, &(l, i))| MiScore {
                feature: FeatureId::new(l, i),
                bits: 10.0 - k as f64,
            })
            .collect();
        select_features(scores, 1.0).unwrap()
    }

    fn score(cultural: f64, fluency: f64) -> AlphaScore {
        AlphaScore { cultural, fluency }
    }

    #[test]
    fn identical_prototypes_give_zero_delta() {
        let p = protos(vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(steering_delta(&p, "L0").unwrap().delta, vec![0.0, 0.0]);
    }

    #[test]
    fn unknown_or_single_label() {
        let p = protos(vec![vec![1.0], vec![2.0]]);
        assert!(matches!(
            steering_delta(&p, "nope"),
            Err(CueError::UnknownLabel(_))
        ));
        let one = protos(vec![vec![1.0]]);
        assert!(steering_delta(&one, "L0").is_err());
    }

    #[test]
    fn identity_decoder_returns_delta() {
        let sel = selection(&[(0, 0), (0, 1), (0, 2)]);
        let dir = SteeringDirection {
            target: "t".into(),
            delta: vec![4.667, -2.167, -0.833],
        };
        let decs = BTreeMap::from([(0, DecoderMatrix::identity(0, 3))]);
        let set = decode_delta(&dir, &sel, &decs, &SteeringOptions::default()).unwrap();
        assert_eq!(set.per_layer[&0], dir.delta);
    }

    #[test]
    fn hand_matrix_product() {
        let sel = selection(&[(0, 0), (0, 1), (0, 2)]);
        let dir = SteeringDirection {
            target: "t".into(),
            delta: vec![1.0, 1.0, 1.0],
        };
        let w = DecoderMatrix::new(0, 3, 2, vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0]).unwrap();
        let set = decode_delta(
            &dir,
            &sel,
            &BTreeMap::from([(0, w)]),
            &SteeringOptions::default(),
        )
        .unwrap();
        assert_eq!(set.per_layer[&0], vec![2.0, 3.0]);
    }

    #[test]
    fn zero_delta_gives_zero_vectors() {
        let sel = selection(&[(0, 1), (1, 0)]);
        let dir = SteeringDirection {
            target: "t".into(),
            delta: vec![0.0, 0.0],
        };
        let decs = BTreeMap::from([
            (0, DecoderMatrix::identity(0, 2)),
            (1, DecoderMatrix::identity(1, 2)),
        ]);
        let set = decode_delta(&dir, &sel, &decs, &SteeringOptions::default()).unwrap();
        assert!(set.is_noop());
        assert_eq!(set.per_layer.len(), 2);
    }

    #[test]
    fn missing_decoder_and_stride() {
        let sel = selection(&[(0, 0), (3, 0)]);
        let dir = SteeringDirection {
            target: "t".into(),
            delta: vec![1.0, 1.0],
        };
        let decs = BTreeMap::from([(0, DecoderMatrix::identity(0, 2))]);
        assert!(decode_delta(&dir, &sel, &decs, &SteeringOptions::default()).is_err());
        let opts = SteeringOptions {
            layers: LayerSubset::from_stride(4).unwrap(),
            normalize: false,
        };
        let set = decode_delta(&dir, &sel, &decs, &opts).unwrap();
        assert_eq!(set.layers().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn width_mismatch_errors() {
        let sel = selection(&[(0, 5)]);
        let dir = SteeringDirection {
            target: "t".into(),
            delta: vec![1.0],
        };
        let decs = BTreeMap::from([(0, DecoderMatrix::identity(0, 3))]);
        assert!(decode_delta(&dir, &sel, &decs, &SteeringOptions::default()).is_err());
    }

    #[test]
    fn normalized_set_has_unit_norm() {
        let sel = selection(&[(0, 0), (1, 1)]);
        let dir = SteeringDirection {
            target: "t".into(),
            delta: vec![3.0, 4.0],
        };
        let decs = BTreeMap::from([
            (0, DecoderMatrix::identity(0, 2)),
            (1, DecoderMatrix::identity(1, 2)),
        ]);
        let opts = SteeringOptions {
            layers: LayerSubset::All,
            normalize: true,
        };
        let set = decode_delta(&dir, &sel, &decs, &opts).unwrap();
        assert!((set.per_layer[&0][0] - 0.6).abs() < 1e-12);
        assert!((set.per_layer[&1][1] - 0.8).abs() < 1e-12);
    }

    fn set(v: Vec<f64>, alpha: f64) -> SteeringVectorSet {
        SteeringVectorSet {
            target: "t".into(),
            alpha,
            selection: String::new(),
            normalized: false,
            per_layer: BTreeMap::from([(0, v)]),
        }
    }

    #[test]
    fn apply_arithmetic() {
        let s = set(vec![2.0, 4.0], 0.5);
        assert_eq!(apply_steering(&[1.0, 2.0], 0, &s).unwrap(), vec![2.0, 4.0]);
        assert_eq!(apply_steering(&[1.0, 2.0], 1, &s).unwrap(), vec![1.0, 2.0]);
        let zero = set(vec![2.0, 4.0], 0.0);
        assert_eq!(
            apply_steering(&[1.0, 2.0], 0, &zero).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(apply_steering(&[1.0], 0, &s).is_err());
    }

    #[test]
    fn apply_then_negate_restores() {
        let h = vec![0.3, -1.7, 2.2];
        let up = set(vec![0.1, 0.7, -3.3], 1.3);
        let down = up.clone().with_alpha(-1.3);
        let back = apply_steering(&apply_steering(&h, 0, &up).unwrap(), 0, &down).unwrap();
        for (a, b) in back.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = set(vec![0.5, -0.25, 3.0], 0.5);
        s.per_layer.insert(4, vec![1.0, 2.0, 3.0]);
        s.save(dir.path()).unwrap();
        assert_eq!(SteeringVectorSet::load(dir.path()).unwrap(), s);
    }

    #[test]
    fn alpha_policy_walkthrough() {
        let p = AlphaPolicy::default();
        let t = [
            (0.25, score(4.0, 8.0)),
            (0.5, score(6.0, 7.0)),
            (1.0, score(7.0, 4.0)),
        ];
        assert_eq!(select_alpha(&t, 5.0, &p).unwrap(), Some(0.5));
        let none = [(0.25, score(9.0, 2.0)), (0.5, score(9.0, 4.9))];
        assert_eq!(select_alpha(&none, 5.0, &p).unwrap(), None);
        assert_eq!(
            select_alpha(&[(0.25, score(9.0, 9.0))], 5.0, &p).unwrap(),
            Some(0.25)
        );
    }

    #[test]
    fn alpha_policy_errors() {
        let p = AlphaPolicy::default();
        assert!(select_alpha(&[], 5.0, &p).is_err());
        assert!(select_alpha(&[(0.3, score(9.0, 9.0))], 5.0, &p).is_err());
        assert!(AlphaPolicy::new(vec![0.5, 0.25], 5.0).is_err());
        assert!(AlphaPolicy::new(vec![0.0, 1.0], 5.0).is_err());
    }
}
