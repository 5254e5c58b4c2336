// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic sparse autoencoder with known decoder directions.
//!
//! `encode(h) = max(0, h W_enc + b_enc)`, `decode(a) = a W_dec`. Decoder
//! rows are unit-norm; the first `min(d_sae, d_model)` rows are
//! orthonormal.

use crate::activations::{DecoderMatrix, DumpManifest, LayerActivations};
use crate::error::{CueError, Result};
use crate::rng;

/// One layer's encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeLayer {
    pub layer: u32,
    /// `d_model x d_sae`, row-major.
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    decoder: DecoderMatrix,
}

impl SaeLayer {
    pub fn new(
        layer: u32,
        w_enc: Vec<f64>,
        b_enc: Vec<f64>,
        decoder: DecoderMatrix,
    ) -> Result<Self> {
        let (d_sae, d_model) = (decoder.rows(), decoder.cols());
        if d_sae < d_model {
            return Err(CueError::invalid("SAE width must be at least d_model"));
        }
        if w_enc.len() != d_model * d_sae {
            return Err(CueError::Dim {
                expected: d_model * d_sae,
                got: w_enc.len(),
                context: "SAE encoder",
            });
        }
        if b_enc.len() != d_sae {
            return Err(CueError::Dim {
                expected: d_sae,
                got: b_enc.len(),
                context: "SAE encoder bias",
            });
        }
        Ok(Self {
            layer,
            w_enc,
            b_enc,
            decoder,
        })
    }

    /// Tied SAE: `W_enc = W_dec^T` and a constant bias.
    pub fn tied(decoder: DecoderMatrix, bias: f64) -> Result<Self> {
        let (d_sae, d_model) = (decoder.rows(), decoder.cols());
        let mut w_enc = vec![0.0; d_model * d_sae];
        for j in 0..d_sae {
            for (i, &x) in decoder.row(j).iter().enumerate() {
                w_enc[i * d_sae + j] = x;
            }
        }
        Self::new(decoder.layer, w_enc, vec![bias; d_sae], decoder)
    }

    pub fn d_sae(&self) -> usize {
        self.decoder.rows()
    }

    pub fn d_model(&self) -> usize {
        self.decoder.cols()
    }

    pub fn decoder(&self) -> &DecoderMatrix {
        &self.decoder
    }

    /// Dense pre-sparsification activations.
    pub fn encode_dense(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d_model() {
            return Err(CueError::Dim {
                expected: self.d_model(),
                got: h.len(),
                context: "SAE encode input",
            });
        }
        let d_sae = self.d_sae();
        let mut z = self.b_enc.clone();
        for (i, &x) in h.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.w_enc[i * d_sae..(i + 1) * d_sae];
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj += x * w;
            }
        }
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(z)
    }

    pub fn encode(&self, h: &[f64]) -> Result<LayerActivations> {
        let z: Vec<f32> = self
            .encode_dense(h)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        LayerActivations::from_dense(&z)
    }

    pub fn decode(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.decoder.decode_dense(a)
    }
}

/// Per-layer synthetic SAEs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSae {
    layers: Vec<SaeLayer>,
}

/// `rows x cols` matrix of unit rows; the first `min(rows, cols)` are
/// orthonormalized (Gram-Schmidt).
pub fn random_dictionary(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng::normal(&mut r)).collect())
        .collect();
    for i in 0..rows {
        let (head, tail) = m.split_at_mut(i);
        let row = &mut tail[0];
        if i < cols {
            for prev in head.iter() {
                let p: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                row.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    m.into_iter().flatten().collect()
}

impl SyntheticSae {
    pub fn from_layers(layers: Vec<SaeLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CueError::invalid("SAE needs at least one layer"));
        }
        if layers.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return Err(CueError::invalid("SAE layers must be strictly increasing"));
        }
        Ok(Self { layers })
    }

    /// Tied random SAEs for layers `0..n_layers` with encoder bias
    /// `-threshold`. With `shared_dictionary` every layer uses the same
    /// decoder directions.
    pub fn random(
        n_layers: u32,
        d_model: usize,
        d_sae: usize,
        threshold: f64,
        shared_dictionary: bool,
        seed: u64,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                let s = if shared_dictionary {
                    rng::derive_seed(seed, "sae-dictionary")
                } else {
                    rng::derive_seed(seed, &format!("sae-dictionary-{l}"))
                };
                let dec =
                    DecoderMatrix::new(l, d_sae, d_model, random_dictionary(d_sae, d_model, s))?;
                SaeLayer::tied(dec, -threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[SaeLayer] {
        &self.layers
    }

    pub fn layer(&self, layer: u32) -> Result<&SaeLayer> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .ok_or_else(|| CueError::invalid(format!("SAE has no layer {layer}")))
    }

    pub fn encode(&self, layer: u32, h: &[f64]) -> Result<LayerActivations> {
        self.layer(layer)?.encode(h)
    }

    pub fn decode(&self, layer: u32, a: &[f64]) -> Result<Vec<f64>> {
        self.layer(layer)?.decode(a)
    }

    pub fn manifest(&self, model_id: &str) -> Result<DumpManifest> {
        DumpManifest::new(
            model_id,
            self.layers
                .iter()
                .map(|l| (l.layer, l.d_sae() as u32, l.d_model() as u32))
                .collect(),
        )
    }
}
