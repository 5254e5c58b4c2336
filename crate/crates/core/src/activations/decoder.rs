// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE decoder matrices, `decoder_L{layer}.bin`.
//!
//! A 64-byte header holding compact JSON `{"layer":L,"rows":R,"cols":C}`,
//! right-padded with spaces and terminated by `\n`, followed by `R * C`
//! row-major `f32` little-endian values. Rows index SAE features, columns
//! the residual dimension.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DumpManifest;
use crate::error::{CueError, Result};

const HEADER_LEN: usize = 64;

#[derive(Serialize, Deserialize)]
struct Header {
    layer: u32,
    rows: u64,
    cols: u64,
}

/// Row-major `rows x cols` decoder held at working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMatrix {
    pub layer: u32,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DecoderMatrix {
    pub fn new(layer: u32, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CueError::invalid("decoder dimensions must be positive"));
        }
        if values.len() != rows * cols {
            return Err(CueError::Dim {
                expected: rows * cols,
                got: values.len(),
                context: "decoder payload",
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CueError::Numeric(format!(
                "decoder layer {layer} has a non-finite value at row {} col {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self {
            layer,
            rows,
            cols,
            values,
        })
    }

    pub fn identity(layer: u32, n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self {
            layer,
            rows: n,
            cols: n,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `W^T x` for a sparse feature-space vector given as `(row, weight)`.
    pub fn transpose_mul_sparse(&self, x: &[(usize, f64)]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.cols];
        for &(r, w) in x {
            if r >= self.rows {
                return Err(CueError::Dim {
                    expected: self.rows,
                    got: r + 1,
                    context: "decoder row index",
                });
            }
            for (o, &d) in out.iter_mut().zip(self.row(r)) {
                *o += w * d;
            }
        }
        Ok(out)
    }

    /// `x W` for a dense feature vector of length `rows`.
    pub fn decode_dense(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(CueError::Dim {
                expected: self.rows,
                got: x.len(),
                context: "decoder input",
            });
        }
        let sparse: Vec<(usize, f64)> = x
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect();
        self.transpose_mul_sparse(&sparse)
    }

    /// Checks dimensions against the dump manifest.
    pub fn check_manifest(&self, manifest: &DumpManifest) -> Result<()> {
        let (Some(w), Some(d)) = (
            manifest.sae_width_of(self.layer),
            manifest.d_model_of(self.layer),
        ) else {
            return Err(CueError::Mismatch(format!(
                "decoder layer {} absent from manifest",
                self.layer
            )));
        };
        if w as usize != self.rows || d as usize != self.cols {
            return Err(CueError::Mismatch(format!(
                "decoder layer {} is {}x{}, manifest says {w}x{d}",
                self.layer, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

pub fn decoder_path(dir: &Path, layer: u32) -> PathBuf {
    dir.join(format!("decoder_L{layer}.bin"))
}

/// Encodes a 64-byte header for any row-major f32 payload file.
pub(crate) fn encode_header(layer: u32, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let json = serde_json::to_string(&Header {
        layer,
        rows: rows as u64,
        cols: cols as u64,
    })
    .map_err(|e| CueError::json("<header>", e))?;
    if json.len() >= HEADER_LEN {
        return Err(CueError::invalid("decoder header does not fit in 64 bytes"));
    }
    let mut h = json.into_bytes();
    h.resize(HEADER_LEN - 1, b' ');
    h.push(b'\n');
    Ok(h)
}

pub fn write_decoder(path: impl AsRef<Path>, m: &DecoderMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = encode_header(m.layer, m.rows, m.cols)?;
    bytes.reserve(m.values.len() * 4);
    for &v in &m.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CueError::io(path, e))
}

/// Parses a header + payload byte buffer.
pub(crate) fn decode_payload(path: &Path, bytes: &[u8]) -> Result<(u32, usize, usize, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(CueError::Truncated {
            path: path.to_path_buf(),
            reason: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        });
    }
    let text = std::str::from_utf8(&bytes[..HEADER_LEN])
        .map_err(|_| CueError::Mismatch(format!("{}: header is not UTF-8", path.display())))?;
    let h: Header = serde_json::from_str(text.trim_end()).map_err(|e| CueError::json(path, e))?;
    let rows = usize::try_from(h.rows).map_err(|_| CueError::invalid("rows overflow"))?;
    let cols = usize::try_from(h.cols).map_err(|_| CueError::invalid("cols overflow"))?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CueError::invalid("decoder dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(CueError::Truncated {
            path: path.to_path_buf(),
            reason: format!(
                "{rows}x{cols} payload needs {expected} bytes, file has {}",
                payload.len()
            ),
        });
    }
    if payload.len() > expected {
        return Err(CueError::Mismatch(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            payload.len() - expected
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((h.layer, rows, cols, values))
}

pub fn read_decoder(path: impl AsRef<Path>) -> Result<DecoderMatrix> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CueError::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| CueError::io(path, e))?;
    let (layer, rows, cols, values) = decode_payload(path, &bytes)?;
    DecoderMatrix::new(layer, rows, cols, values)
}

/// Loads `decoder_L{n}.bin` for each requested layer and checks it against
/// the manifest.
pub fn read_decoders(
    dir: impl AsRef<Path>,
    layers: impl IntoIterator<Item = u32>,
    manifest: &DumpManifest,
) -> Result<BTreeMap<u32, DecoderMatrix>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for layer in layers {
        let m = read_decoder(decoder_path(dir, layer))?;
        if m.layer != layer {
            return Err(CueError::Mismatch(format!(
                "decoder_L{layer}.bin declares layer {}",
                m.layer
            )));
        }
        m.check_manifest(manifest)?;
        out.insert(layer, m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let m = DecoderMatrix::identity(3, 3);
        write_decoder(&p, &m).unwrap();
        assert_eq!(read_decoder(&p).unwrap(), m);
    }

    #[test]
    fn small_matrix_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let m = DecoderMatrix::new(0, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_decoder(&p, &m).unwrap();
        let back = read_decoder(&p).unwrap();
        assert_eq!(back.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fs::read(&p).unwrap().len(), 64 + 16);
    }

    #[test]
    fn short_payload_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let mut bytes = encode_header(12, 16384, 3584).unwrap();
        bytes.extend_from_slice(&[0u8; 1024]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_decoder(&p).unwrap_err(),
            CueError::Truncated { .. }
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let mut bytes = encode_header(0, 1, 2).unwrap();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_decoder(&p).unwrap_err(),
            CueError::Numeric(_)
        ));
    }

    #[test]
    fn manifest_dims_checked() {
        let m = DumpManifest::new("toy", vec![(0, 4, 2)]).unwrap();
        assert!(DecoderMatrix::identity(0, 2).check_manifest(&m).is_err());
        let ok = DecoderMatrix::new(0, 4, 2, vec![0.0; 8]).unwrap();
        ok.check_manifest(&m).unwrap();
    }

    #[test]
    fn transpose_mul_hand_product() {
        let m = DecoderMatrix::new(0, 3, 2, vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0]).unwrap();
        let v = m.decode_dense(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(v, vec![2.0, 3.0]);
    }
}
