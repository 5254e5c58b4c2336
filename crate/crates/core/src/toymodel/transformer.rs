// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomly initialized pre-norm decoder-only transformer.
//!
//! Each block is `h += attn(rms(h)); h += mlp(rms(h))` with causal
//! multi-head attention and a GELU MLP of width `4 * d_model`. Logits are
//! `logit_gain * U rms(h_final)`. The residual after block `l` is hook
//! point `l`.

use std::collections::BTreeMap;

use crate::error::{CueError, Result};
use crate::rng::{self, Pcg64};
use crate::steering::SteeringVectorSet;

use super::ToyConfig;

const RMS_EPS: f64 = 1e-6;

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn gaussian(rows: usize, cols: usize, std: f64, r: &mut Pcg64) -> Self {
        let data = (0..rows * cols).map(|_| std * rng::normal(r)).collect();
        Self { rows, cols, data }
    }

    /// `x M` for `x` of length `rows`.
    fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w1: Mat,
    w2: Mat,
}

/// Positions that receive the steering intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterventionScope {
    #[default]
    All,
    PromptOnly,
    GeneratedOnly,
}

impl InterventionScope {
    fn covers(self, pos: usize, prompt_len: usize) -> bool {
        match self {
            Self::All => true,
            Self::PromptOnly => pos < prompt_len,
            Self::GeneratedOnly => pos >= prompt_len,
        }
    }
}

/// Logits and post-intervention residuals for every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    pub residuals: BTreeMap<u32, Vec<Vec<f64>>>,
}

/// Prompt plus sampled continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

impl Generation {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ToyConfig,
    embed: Vec<Vec<f64>>,
    pos: Vec<Vec<f64>>,
    blocks: Vec<Block>,
    unembed: Vec<Vec<f64>>,
}

fn random_vector(d: usize, norm: f64, r: &mut Pcg64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng::normal(r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| norm * x / n).collect()
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * s).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_into(h: &mut [f64], d: &[f64]) {
    h.iter_mut().zip(d).for_each(|(a, b)| *a += b);
}

impl ToyTransformer {
    /// Draws every weight from `config.seed`.
    pub fn random(config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut r = rng::seeded(rng::derive_seed(config.seed, "toy-transformer"));
        let embed = (0..config.vocab)
            .map(|_| random_vector(d, config.embed_scale, &mut r))
            .collect();
        let pos = (0..config.max_seq)
            .map(|_| random_vector(d, config.pos_scale, &mut r))
            .collect();
        let s = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                wq: Mat::gaussian(d, d, s * config.qk_gain, &mut r),
                wk: Mat::gaussian(d, d, s, &mut r),
                wv: Mat::gaussian(d, d, s, &mut r),
                wo: Mat::gaussian(d, d, s * config.block_gain, &mut r),
                w1: Mat::gaussian(d, 4 * d, s, &mut r),
                w2: Mat::gaussian(
                    4 * d,
                    d,
                    config.block_gain / (4.0 * d as f64).sqrt(),
                    &mut r,
                ),
            })
            .collect();
        let unembed = (0..config.vocab)
            .map(|_| random_vector(d, 1.0, &mut r))
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            pos,
            blocks,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Ties token `t` to a unit direction: embedding `embed_scale * dir`,
    /// unembedding row `dir`.
    pub fn tie_token(&mut self, t: usize, dir: &[f64]) -> Result<()> {
        self.check_token(t)?;
        if dir.len() != self.config.d_model {
            return Err(CueError::Dim {
                expected: self.config.d_model,
                got: dir.len(),
                context: "tied token direction",
            });
        }
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(CueError::Numeric("tied direction has zero norm".into()));
        }
        self.embed[t] = dir
            .iter()
            .map(|x| self.config.embed_scale * x / n)
            .collect();
        self.unembed[t] = dir.iter().map(|x| x / n).collect();
        Ok(())
    }

    pub fn unembedding_row(&self, t: usize) -> Result<&[f64]> {
        self.check_token(t)?;
        Ok(&self.unembed[t])
    }

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.config.vocab {
            return Err(CueError::invalid(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(CueError::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(CueError::invalid(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }

    fn attention(&self, b: &Block, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n_heads = self.config.n_heads;
        let hd = self.config.d_model / n_heads;
        let normed: Vec<Vec<f64>> = h.iter().map(|x| rms_norm(x)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| b.wq.left_mul(x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| b.wk.left_mul(x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| b.wv.left_mul(x)).collect();
        let scale = 1.0 / (hd as f64).sqrt();
        (0..h.len())
            .map(|i| {
                let mut concat = vec![0.0; self.config.d_model];
                for head in 0..n_heads {
                    let r = head * hd..(head + 1) * hd;
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            q[i][r.clone()]
                                .iter()
                                .zip(&k[j][r.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = w.iter().sum();
                    for (j, wj) in w.iter().enumerate() {
                        for (c, &vv) in concat[r.clone()].iter_mut().zip(&v[j][r.clone()]) {
                            *c += wj / z * vv;
                        }
                    }
                }
                b.wo.left_mul(&concat)
            })
            .collect()
    }

    fn mlp(&self, b: &Block, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = b.w1.left_mul(&rms_norm(x)).into_iter().map(gelu).collect();
        b.w2.left_mul(&hidden)
    }

    /// Full forward pass with optional steering after every hooked block.
    pub fn forward_with_hooks(
        &self,
        tokens: &[usize],
        interventions: Option<&SteeringVectorSet>,
    ) -> Result<ForwardOutput> {
        self.forward_scoped(tokens, interventions, InterventionScope::All, tokens.len())
    }

    /// As [`Self::forward_with_hooks`], restricting the intervention to the
    /// positions selected by `scope` relative to `prompt_len`.
    pub fn forward_scoped(
        &self,
        tokens: &[usize],
        interventions: Option<&SteeringVectorSet>,
        scope: InterventionScope,
        prompt_len: usize,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let mut x = self.embed[t].clone();
                add_into(&mut x, &self.pos[p]);
                x
            })
            .collect();
        let mut residuals = BTreeMap::new();
        for (l, b) in self.blocks.iter().enumerate() {
            let layer = l as u32;
            let attn = self.attention(b, &h);
            for (x, a) in h.iter_mut().zip(&attn) {
                add_into(x, a);
            }
            for x in &mut h {
                let m = self.mlp(b, x);
                add_into(x, &m);
            }
            if let Some(set) = interventions {
                for (p, x) in h.iter_mut().enumerate() {
                    if scope.covers(p, prompt_len) {
                        set.apply_in_place(x, layer)?;
                    }
                }
            }
            if h.iter().flatten().any(|v| !v.is_finite()) {
                return Err(CueError::Numeric(format!(
                    "residual at layer {layer} is not finite"
                )));
            }
            residuals.insert(layer, h.clone());
        }
        let g = self.config.logit_gain;
        let logits = h
            .iter()
            .map(|x| {
                let n = rms_norm(x);
                self.unembed
                    .iter()
                    .map(|u| g * u.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            })
            .collect();
        Ok(ForwardOutput { logits, residuals })
    }

    /// Samples `n_new` tokens at `temperature` (0 = greedy). Every step
    /// recomputes the full sequence.
    pub fn generate(
        &self,
        prompt: &[usize],
        n_new: usize,
        temperature: f64,
        r: &mut Pcg64,
        steering: Option<&SteeringVectorSet>,
        scope: InterventionScope,
    ) -> Result<Generation> {
        self.check_tokens(prompt)?;
        if prompt.len() + n_new > self.config.max_seq {
            return Err(CueError::invalid(
                "prompt plus continuation exceeds max_seq",
            ));
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..n_new {
            let out = self.forward_scoped(&tokens, steering, scope, prompt.len())?;
            let last = out.logits.last().expect("non-empty sequence");
            tokens.push(sample(last, temperature, r));
        }
        Ok(Generation {
            tokens,
            prompt_len: prompt.len(),
        })
    }

    /// Mean log-probability per continuation token under the unsteered
    /// model.
    pub fn mean_loglik(&self, tokens: &[usize], prompt_len: usize) -> Result<f64> {
        if prompt_len == 0 || prompt_len >= tokens.len() {
            return Err(CueError::invalid(
                "log-likelihood needs a prompt and a continuation",
            ));
        }
        let out = self.forward_with_hooks(tokens, None)?;
        let mut total = 0.0;
        for (logits, &t) in out.logits[prompt_len - 1..]
            .iter()
            .zip(&tokens[prompt_len..])
        {
            total += log_softmax_at(logits, t);
        }
        Ok(total / (tokens.len() - prompt_len) as f64)
    }
}

fn log_softmax_at(logits: &[f64], t: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[t] - m - z.ln()
}

/// Inverse-CDF draw from `softmax(logits / temperature)`; ties in greedy
/// mode go to the lowest token.
fn sample(logits: &[f64], temperature: f64, r: &mut Pcg64) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|l| ((l - m) / temperature).exp())
        .collect();
    let z: f64 = w.iter().sum();
    let u = rng::unit(r) * z;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyTransformer {
        ToyTransformer::random(&ToyConfig::default()).unwrap()
    }

    fn steer(layer: u32, v: Vec<f64>, alpha: f64) -> SteeringVectorSet {
        SteeringVectorSet {
            target: "t".into(),
            alpha,
            selection: String::new(),
            normalized: false,
            per_layer: BTreeMap::from([(layer, v)]),
        }
    }

    #[test]
    fn deterministic_logits() {
        let toks = [1, 5, 9, 3];
        let a = model().forward_with_hooks(&toks, None).unwrap();
        let b = model().forward_with_hooks(&toks, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alpha_zero_is_noop() {
        let m = model();
        let toks = [2, 4, 6];
        let plain = m.forward_with_hooks(&toks, None).unwrap();
        let s = steer(0, vec![1.0; 32], 0.0);
        assert_eq!(plain, m.forward_with_hooks(&toks, Some(&s)).unwrap());
    }

    #[test]
    fn residuals_are_post_intervention() {
        let m = model();
        let toks = [2, 4];
        let plain = m.forward_with_hooks(&toks, None).unwrap();
        let v = vec![0.5; 32];
        let s = steer(1, v.clone(), 2.0);
        let out = m.forward_with_hooks(&toks, Some(&s)).unwrap();
        assert_eq!(out.residuals[&0], plain.residuals[&0]);
        for p in 0..2 {
            for (i, d) in v.iter().enumerate() {
                let want = plain.residuals[&1][p][i] + 2.0 * d;
                assert!((out.residuals[&1][p][i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_steering_raises_logit() {
        let m = model();
        let toks = [7, 8, 9];
        let t = 11;
        let u = m.unembedding_row(t).unwrap().to_vec();
        let mut prev = m.forward_with_hooks(&toks, None).unwrap().logits[2][t];
        for alpha in [0.25, 0.5, 1.0, 2.0] {
            let s = steer(0, u.clone(), alpha);
            let l = m.forward_with_hooks(&toks, Some(&s)).unwrap().logits[2][t];
            assert!(l > prev, "alpha {alpha}: {l} <= {prev}");
            prev = l;
        }
    }

    #[test]
    fn bad_tokens_rejected() {
        let m = model();
        assert!(m.forward_with_hooks(&[64], None).is_err());
        assert!(m.forward_with_hooks(&[], None).is_err());
        assert!(m.forward_with_hooks(&[0; 33], None).is_err());
    }

    #[test]
    fn generation_reproducible_and_bounded() {
        let m = model();
        let g1 = m
            .generate(
                &[0, 1],
                6,
                0.9,
                &mut rng::seeded(3),
                None,
                InterventionScope::All,
            )
            .unwrap();
        let g2 = m
            .generate(
                &[0, 1],
                6,
                0.9,
                &mut rng::seeded(3),
                None,
                InterventionScope::All,
            )
            .unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.generated().len(), 6);
        let ll = m.mean_loglik(&g1.tokens, 2).unwrap();
        assert!(ll < 0.0 && ll.is_finite());
    }

    #[test]
    fn greedy_takes_argmax() {
        assert_eq!(sample(&[0.1, 3.0, 3.0, -1.0], 0.0, &mut rng::seeded(0)), 1);
    }

    #[test]
    fn scoped_intervention_skips_prompt() {
        let m = model();
        let toks = [3, 4, 5];
        let s = steer(0, vec![1.0; 32], 1.0);
        let out = m
            .forward_scoped(&toks, Some(&s), InterventionScope::GeneratedOnly, 2)
            .unwrap();
        let plain = m.forward_with_hooks(&toks, None).unwrap();
        assert_eq!(out.logits[0], plain.logits[0]);
        assert_eq!(out.logits[1], plain.logits[1]);
        assert_ne!(out.logits[2], plain.logits[2]);
    }
}
