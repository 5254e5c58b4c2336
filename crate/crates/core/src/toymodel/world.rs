// SPDX-License-Identifier: MIT OR Apache-2.0

//! The assembled oracle: planted spec, SAE, transformer and the token map
//! tying them together.
//!
//! In aligned mode the tokens `0..n_tied` are tied, in order, to the
//! dictionary indices of each label's planted features (label order),
//! then shared, then universal features. The next token is BOS and the
//! rest are filler.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    Generation, InterventionScope, Layout, PlantedSpec, SyntheticSae, ToyConfig, ToyTransformer,
};
use crate::activations::{
    max_pool_tokens, ActivationRecord, DecoderMatrix, DumpManifest, FeatureId, LayerActivations,
};
use crate::corpus::{Assertion, Corpus};
use crate::error::{CueError, Result};
use crate::probes::Pooling;
use crate::rng::{self, Pcg64};
use crate::steering::SteeringVectorSet;

/// Model id written into oracle manifests.
pub const MODEL_ID: &str = "cuekit-toy";

/// Filler tokens after BOS in a generated prompt.
const PROMPT_FILLERS: usize = 3;

/// Batch of sampled responses to one prompt style.
///
/// Response `i` draws its prompt from `derive_seed(seed, "prompt-{i}")`
/// and its samples from `derive_seed(seed, "sample-{i}")`, so batches that
/// differ only in steering share their random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub n: usize,
    pub n_new: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        Self {
            n: 100,
            n_new: 20,
            temperature: 0.9,
            seed: 0,
        }
    }
}

/// Word-type probabilities of a synthetic assertion; the remainder is
/// filler. An empty pool (no shared group) falls back to filler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMix {
    pub planted: f64,
    pub shared: f64,
    pub universal: f64,
}

impl Default for CorpusMix {
    fn default() -> Self {
        Self {
            planted: 0.6,
            shared: 0.1,
            universal: 0.1,
        }
    }
}

impl CorpusMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.planted, self.shared, self.universal];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || parts.iter().sum::<f64>() > 1.0 {
            return Err(CueError::invalid(
                "corpus mix must be probabilities summing to at most 1",
            ));
        }
        Ok(())
    }
}

/// Serialized oracle configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default)]
    pub toy: ToyConfig,
    pub planted: PlantedSpec,
}

impl WorldConfig {
    /// Default layout over `toy.n_layers` layers.
    pub fn with_layout(toy: ToyConfig, layout: Layout, noise_rate: f64) -> Result<Self> {
        let planted = PlantedSpec::layout(layout, toy.n_layers, noise_rate)?;
        Ok(Self { toy, planted })
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    config: WorldConfig,
    sae: SyntheticSae,
    model: ToyTransformer,
    /// Dictionary index per tied token.
    tied: Vec<u32>,
    bos: usize,
}

impl ToyWorld {
    pub fn build(config: WorldConfig) -> Result<Self> {
        let toy = &config.toy;
        toy.validate()?;
        config.planted.validate(toy.n_layers, toy.d_sae as u32)?;
        let sae = SyntheticSae::random(
            toy.n_layers,
            toy.d_model,
            toy.d_sae,
            toy.sae_threshold,
            toy.aligned_unembedding,
            toy.seed,
        )?;
        let mut model = ToyTransformer::random(toy)?;
        let mut tied = Vec::new();
        if toy.aligned_unembedding {
            let spec = &config.planted;
            let mut seen = BTreeSet::new();
            let order = spec
                .labels
                .iter()
                .flat_map(|l| spec.planted_for(l).iter().copied())
                .chain(spec.shared.iter().flat_map(|g| g.features.iter().copied()))
                .chain(spec.universal.iter().copied());
            for f in order {
                if seen.insert(f.index) {
                    tied.push(f.index);
                }
            }
            if tied.len() + 2 > toy.vocab {
                return Err(CueError::invalid(format!(
                    "aligned mode ties {} tokens; vocabulary of {} leaves no BOS and filler",
                    tied.len(),
                    toy.vocab
                )));
            }
            let dict = sae.layers()[0].decoder();
            for (t, &j) in tied.iter().enumerate() {
                model.tie_token(t, dict.row(j as usize))?;
            }
        } else if toy.vocab < 2 {
            return Err(CueError::invalid("vocabulary needs BOS and one filler"));
        }
        let bos = tied.len();
        Ok(Self {
            config,
            sae,
            model,
            tied,
            bos,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn spec(&self) -> &PlantedSpec {
        &self.config.planted
    }

    pub fn sae(&self) -> &SyntheticSae {
        &self.sae
    }

    pub fn model(&self) -> &ToyTransformer {
        &self.model
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn manifest(&self) -> Result<DumpManifest> {
        self.sae.manifest(MODEL_ID)
    }

    pub fn decoders(&self) -> BTreeMap<u32, DecoderMatrix> {
        self.sae
            .layers()
            .iter()
            .map(|l| (l.layer, l.decoder().clone()))
            .collect()
    }

    /// Token tied to a feature's dictionary index, if any.
    pub fn token_for(&self, f: FeatureId) -> Option<usize> {
        self.tied.iter().position(|&j| j == f.index)
    }

    fn tokens_of(&self, feats: impl IntoIterator<Item = FeatureId>) -> Vec<usize> {
        let set: BTreeSet<usize> = feats
            .into_iter()
            .filter_map(|f| self.token_for(f))
            .collect();
        set.into_iter().collect()
    }

    fn fillers(&self) -> std::ops::Range<usize> {
        self.bos + 1..self.config.toy.vocab
    }

    fn require_aligned(&self) -> Result<()> {
        if self.tied.is_empty() {
            return Err(CueError::invalid(
                "operation needs aligned-unembedding mode",
            ));
        }
        Ok(())
    }

    fn require_label(&self, label: &str) -> Result<()> {
        if !self.spec().labels.iter().any(|l| l == label) {
            return Err(CueError::UnknownLabel(label.to_owned()));
        }
        Ok(())
    }

    /// Whitespace tokenizer: `w<n>` is token `n`, any other word hashes
    /// (FNV-1a 64) into the vocabulary. BOS is prepended and the result is
    /// truncated to `max_seq`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let vocab = self.config.toy.vocab;
        let mut out = vec![self.bos];
        for w in text.split_whitespace() {
            let direct = w
                .strip_prefix('w')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n < vocab);
            out.push(direct.unwrap_or_else(|| (fnv1a(w.as_bytes()) % vocab as u64) as usize));
        }
        out.truncate(self.config.toy.max_seq);
        out
    }

    /// Inverse of [`Self::tokenize`] for in-vocabulary tokens; a leading
    /// BOS is dropped.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        let body = match tokens.first() {
            Some(&t) if t == self.bos => &tokens[1..],
            _ => tokens,
        };
        body.iter()
            .map(|t| format!("w{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Labelled token sequences whose words mix the label's planted,
    /// group-shared and universal tokens with filler in the proportions of
    /// `mix`. Ids are `{label}-{i:04}`.
    pub fn synthetic_corpus(
        &self,
        n_per_label: usize,
        words: usize,
        mix: CorpusMix,
        seed: u64,
    ) -> Result<Corpus> {
        self.require_aligned()?;
        mix.validate()?;
        if words == 0 || words + 1 > self.config.toy.max_seq {
            return Err(CueError::invalid("assertion length must fit in max_seq"));
        }
        let spec = self.spec();
        let universal = self.tokens_of(spec.universal.iter().copied());
        let fillers = self.fillers();
        let mut r = rng::seeded(rng::derive_seed(seed, "synthetic-corpus"));
        let mut records = Vec::new();
        for label in &spec.labels {
            let planted = self.tokens_of(spec.planted_for(label).iter().copied());
            let shared = self.tokens_of(spec.shared_for(label));
            for i in 0..n_per_label {
                let text: Vec<usize> = (0..words)
                    .map(|_| {
                        let u = rng::unit(&mut r);
                        let pool: &[usize] = if u < mix.planted {
                            &planted
                        } else if u < mix.planted + mix.shared {
                            &shared
                        } else if u < mix.planted + mix.shared + mix.universal {
                            &universal
                        } else {
                            &[]
                        };
                        if pool.is_empty() {
                            fillers.start + rng::below(&mut r, fillers.len())
                        } else {
                            pool[rng::below(&mut r, pool.len())]
                        }
                    })
                    .collect();
                records.push(Assertion {
                    id: format!("{label}-{i:04}"),
                    label: label.clone(),
                    text: self.detokenize(&text),
                });
            }
        }
        Corpus::from_records(records)
    }

    /// BOS followed by random filler tokens.
    pub fn implicit_prompt(&self, r: &mut Pcg64) -> Vec<usize> {
        let fillers = self.fillers();
        let mut p = vec![self.bos];
        p.extend((0..PROMPT_FILLERS).map(|_| fillers.start + rng::below(r, fillers.len())));
        p
    }

    /// Implicit prompt plus the token of the target's first planted
    /// feature.
    pub fn explicit_prompt(&self, r: &mut Pcg64, target: &str) -> Result<Vec<usize>> {
        self.require_aligned()?;
        self.require_label(target)?;
        let mention = self
            .spec()
            .planted_for(target)
            .first()
            .and_then(|&f| self.token_for(f))
            .ok_or_else(|| CueError::invalid(format!("label {target} has no planted token")))?;
        let mut p = self.implicit_prompt(r);
        p.push(mention);
        Ok(p)
    }

    /// Samples `plan.n` responses. With `explicit`, prompts mention
    /// `target`; steering applies at every position.
    pub fn generate_responses(
        &self,
        target: &str,
        explicit: bool,
        steering: Option<&SteeringVectorSet>,
        plan: &GenerationPlan,
    ) -> Result<Vec<Generation>> {
        self.require_label(target)?;
        (0..plan.n)
            .into_par_iter()
            .map(|i| {
                let mut pr = rng::seeded(rng::derive_seed(plan.seed, &format!("prompt-{i}")));
                let prompt = if explicit {
                    self.explicit_prompt(&mut pr, target)?
                } else {
                    self.implicit_prompt(&mut pr)
                };
                let mut gr = rng::seeded(rng::derive_seed(plan.seed, &format!("sample-{i}")));
                self.model.generate(
                    &prompt,
                    plan.n_new,
                    plan.temperature,
                    &mut gr,
                    steering,
                    InterventionScope::All,
                )
            })
            .collect()
    }

    /// SAE activations of the unsteered model, max-pooled over positions
    /// `from..`.
    pub fn read_activations(
        &self,
        id: &str,
        label: &str,
        tokens: &[usize],
        from: usize,
    ) -> Result<ActivationRecord> {
        if from >= tokens.len() {
            return Err(CueError::invalid("no positions to pool"));
        }
        let out = self.model.forward_with_hooks(tokens, None)?;
        let mut rec = ActivationRecord::new(id, label);
        for sae in self.sae.layers() {
            let per_token = out.residuals[&sae.layer][from..]
                .iter()
                .map(|h| sae.encode(h))
                .collect::<Result<Vec<LayerActivations>>>()?;
            rec = rec.with_layer(sae.layer, max_pool_tokens(&per_token, sae.d_sae())?);
        }
        Ok(rec)
    }

    /// Reads the continuation of a generation.
    pub fn read_response(&self, id: &str, label: &str, g: &Generation) -> Result<ActivationRecord> {
        self.read_activations(id, label, &g.tokens, g.prompt_len)
    }

    /// Pooled residual vectors per layer (unsteered). BOS is excluded from
    /// mean pooling.
    pub fn residual_features(
        &self,
        tokens: &[usize],
        pooling: Pooling,
    ) -> Result<BTreeMap<u32, Vec<f64>>> {
        let out = self.model.forward_with_hooks(tokens, None)?;
        let start = usize::from(tokens.len() > 1 && tokens[0] == self.bos);
        Ok(out
            .residuals
            .into_iter()
            .map(|(l, hs)| {
                let v = match pooling {
                    Pooling::FinalToken => hs.last().expect("non-empty").clone(),
                    Pooling::Mean => {
                        let rows = &hs[start..];
                        let mut m = vec![0.0; rows[0].len()];
                        for h in rows {
                            m.iter_mut().zip(h).for_each(|(a, b)| *a += b);
                        }
                        m.iter_mut().for_each(|a| *a /= rows.len() as f64);
                        m
                    }
                };
                (l, v)
            })
            .collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws planted activations directly, without the transformer.
///
/// Records come out label-major in `spec.labels` order with ids
/// `{label}-{i:04}`. Structured features fire with a strength drawn
/// uniformly from `firing_strength`; every other dictionary feature fires
/// independently with probability `noise_rate`.
pub fn generate_synthetic_dump(
    spec: &PlantedSpec,
    sae: &SyntheticSae,
    n_per_label: usize,
    seed: u64,
) -> Result<(DumpManifest, Vec<ActivationRecord>)> {
    if n_per_label == 0 {
        return Err(CueError::invalid("n_per_label must be at least 1"));
    }
    let manifest = sae.manifest(MODEL_ID)?;
    let min_width = sae.layers().iter().map(|l| l.d_sae()).min().unwrap_or(0);
    let last_layer = sae.layers().last().map_or(0, |l| l.layer);
    spec.validate(last_layer + 1, min_width as u32)?;
    if let Some(f) = spec
        .structured()
        .into_iter()
        .find(|f| !manifest.has_layer(f.layer))
    {
        return Err(CueError::invalid(format!(
            "feature {f} is on a layer the SAE lacks"
        )));
    }
    let structured = spec.structured();
    let firing: BTreeMap<&str, BTreeSet<FeatureId>> = spec
        .labels
        .iter()
        .map(|l| (l.as_str(), spec.firing_for(l)))
        .collect();
    let (lo, hi) = (spec.firing_strength.min, spec.firing_strength.max);
    let mut r = rng::seeded(rng::derive_seed(seed, "synthetic-dump"));
    let strength = |r: &mut Pcg64| (lo + (hi - lo) * rng::unit(r)) as f32;
    let mut records = Vec::with_capacity(spec.labels.len() * n_per_label);
    for label in &spec.labels {
        for i in 0..n_per_label {
            let mut dense: BTreeMap<u32, Vec<f32>> = sae
                .layers()
                .iter()
                .map(|l| (l.layer, vec![0.0; l.d_sae()]))
                .collect();
            for f in &firing[label.as_str()] {
                dense.get_mut(&f.layer).expect("layer checked")[f.index as usize] =
                    strength(&mut r);
            }
            for (&layer, row) in &mut dense {
                for (j, slot) in row.iter_mut().enumerate() {
                    if structured.contains(&FeatureId::new(layer, j as u32)) {
                        continue;
                    }
                    if rng::unit(&mut r) < spec.noise_rate {
                        *slot = strength(&mut r);
                    }
                }
            }
            let mut rec = ActivationRecord::new(format!("{label}-{i:04}"), label.clone());
            for (layer, row) in dense {
                rec = rec.with_layer(layer, LayerActivations::from_dense(&row)?);
            }
            records.push(rec);
        }
    }
    let mut manifest = manifest;
    manifest.record_count = records.len() as u64;
    Ok((manifest, records))
}
