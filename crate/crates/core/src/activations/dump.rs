// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation dumps: `manifest.json` plus `records.bin`.
//!
//! `records.bin` layout (all integers little-endian):
//!
//! ```text
//! magic    b"CUEDUMP1"
//! record*  id_len:u32 id:utf8  label_len:u32 label:utf8
//!          n_blocks:varint
//!          block*   layer:u32 count:varint (index:u32 value:f32)*count
//!          crc:u32  CRC-32 (IEEE) of every record byte before it
//! ```
//!
//! Varints are unsigned LEB128. Blocks appear in ascending layer order and
//! entries in ascending index order. The manifest's `record_count` is the
//! number of records in the file; readers treat a shortfall as truncation.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActivationRecord, LayerActivations};
use crate::error::{CueError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";
const MAGIC: &[u8; 8] = b"CUEDUMP1";
const FORMAT: &str = "cuekit-dump";
const VERSION: u32 = 1;

/// Layer configuration of a dump. `layers`, `sae_width` and `d_model` are
/// parallel arrays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_version")]
    pub version: u32,
    pub model_id: String,
    pub layers: Vec<u32>,
    pub sae_width: Vec<u32>,
    pub d_model: Vec<u32>,
    pub record_count: u64,
}

fn default_format() -> String {
    FORMAT.to_owned()
}

fn default_version() -> u32 {
    VERSION
}

impl DumpManifest {
    pub fn new(model_id: impl Into<String>, layers: Vec<(u32, u32, u32)>) -> Result<Self> {
        let m = Self {
            format: default_format(),
            version: VERSION,
            model_id: model_id.into(),
            layers: layers.iter().map(|l| l.0).collect(),
            sae_width: layers.iter().map(|l| l.1).collect(),
            d_model: layers.iter().map(|l| l.2).collect(),
            record_count: 0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(CueError::Mismatch(format!(
                "unsupported dump format {} v{}",
                self.format, self.version
            )));
        }
        if self.sae_width.len() != self.layers.len() || self.d_model.len() != self.layers.len() {
            return Err(CueError::Mismatch(
                "manifest layers, sae_width and d_model lengths differ".into(),
            ));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CueError::Mismatch(
                "manifest layers not strictly increasing".into(),
            ));
        }
        if self.sae_width.iter().chain(&self.d_model).any(|&w| w == 0) {
            return Err(CueError::Mismatch(
                "manifest widths must be positive".into(),
            ));
        }
        Ok(())
    }

    fn position(&self, layer: u32) -> Option<usize> {
        self.layers.binary_search(&layer).ok()
    }

    pub fn has_layer(&self, layer: u32) -> bool {
        self.position(layer).is_some()
    }

    pub fn sae_width_of(&self, layer: u32) -> Option<u32> {
        self.position(layer).map(|p| self.sae_width[p])
    }

    pub fn d_model_of(&self, layer: u32) -> Option<u32> {
        self.position(layer).map(|p| self.d_model[p])
    }

    /// Checks that a record only references manifest layers and in-range
    /// indices.
    pub fn check_record(&self, rec: &ActivationRecord) -> Result<()> {
        for (&layer, acts) in &rec.per_layer {
            let width = self.sae_width_of(layer).ok_or_else(|| {
                CueError::Mismatch(format!(
                    "record {:?} references layer {layer} absent from manifest",
                    rec.assertion_id
                ))
            })?;
            if let Some(max) = acts.max_index() {
                if max >= width {
                    return Err(CueError::Mismatch(format!(
                        "record {:?} layer {layer} index {max} >= sae width {width}",
                        rec.assertion_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(CueError::MissingInput(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| CueError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CueError::json(&path, e))?;
        m.validate()?;
        Ok(m)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CueError::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CueError::io(&path, e))
    }
}

fn write_varint(buf: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| CueError::invalid("string longer than u32::MAX bytes"))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_record(rec: &ActivationRecord, buf: &mut Vec<u8>) -> Result<()> {
    buf.clear();
    write_str(buf, &rec.assertion_id)?;
    write_str(buf, &rec.label)?;
    write_varint(buf, rec.per_layer.len() as u64);
    for (&layer, acts) in &rec.per_layer {
        buf.extend_from_slice(&layer.to_le_bytes());
        write_varint(buf, acts.len() as u64);
        for &(i, v) in acts.entries() {
            buf.extend_from_slice(&i.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

/// Streaming dump writer. The manifest is written by [`DumpWriter::finish`]
/// with `record_count` set to the number of records written.
pub struct DumpWriter {
    dir: PathBuf,
    manifest: DumpManifest,
    out: BufWriter<File>,
    buf: Vec<u8>,
    count: u64,
}

impl DumpWriter {
    pub fn create(dir: impl AsRef<Path>, manifest: &DumpManifest) -> Result<Self> {
        manifest.validate()?;
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CueError::io(&dir, e))?;
        let path = dir.join(RECORDS_FILE);
        let file = File::create(&path).map_err(|e| CueError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC).map_err(|e| CueError::io(&path, e))?;
        Ok(Self {
            dir,
            manifest: manifest.clone(),
            out,
            buf: Vec::new(),
            count: 0,
        })
    }

    pub fn write(&mut self, rec: &ActivationRecord) -> Result<()> {
        self.manifest.check_record(rec)?;
        encode_record(rec, &mut self.buf)?;
        self.out
            .write_all(&self.buf)
            .map_err(|e| CueError::io(self.dir.join(RECORDS_FILE), e))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DumpManifest> {
        self.out
            .flush()
            .map_err(|e| CueError::io(self.dir.join(RECORDS_FILE), e))?;
        self.manifest.record_count = self.count;
        self.manifest.save(&self.dir)?;
        Ok(self.manifest)
    }
}

/// Writes a complete dump into `dir`, returning the manifest as stored.
pub fn write_dump<'a, I>(
    dir: impl AsRef<Path>,
    manifest: &DumpManifest,
    records: I,
) -> Result<DumpManifest>
where
    I: IntoIterator<Item = &'a ActivationRecord>,
{
    let mut w = DumpWriter::create(dir, manifest)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Streaming reader over `records.bin`; yields records in file order.
pub struct DumpReader {
    path: PathBuf,
    manifest: DumpManifest,
    input: BufReader<File>,
    buf: Vec<u8>,
    read: u64,
    done: bool,
}

/// Opens a dump directory.
pub fn read_dump(dir: impl AsRef<Path>) -> Result<(DumpManifest, DumpReader)> {
    let dir = dir.as_ref();
    let manifest = DumpManifest::load(dir)?;
    let path = dir.join(RECORDS_FILE);
    if !path.exists() {
        return Err(CueError::MissingInput(path));
    }
    let file = File::open(&path).map_err(|e| CueError::io(&path, e))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => CueError::Truncated {
            path: path.clone(),
            reason: "missing file magic".into(),
        },
        _ => CueError::io(&path, e),
    })?;
    if &magic != MAGIC {
        return Err(CueError::Mismatch(format!(
            "{} is not a cuekit dump",
            path.display()
        )));
    }
    let reader = DumpReader {
        path,
        manifest: manifest.clone(),
        input,
        buf: Vec::new(),
        read: 0,
        done: false,
    };
    Ok((manifest, reader))
}

/// Reads a whole dump into memory.
pub fn read_dump_all(dir: impl AsRef<Path>) -> Result<(DumpManifest, Vec<ActivationRecord>)> {
    let (m, reader) = read_dump(dir)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((m, records))
}

impl DumpReader {
    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    fn truncated(&self, what: &str) -> CueError {
        CueError::Truncated {
            path: self.path.clone(),
            reason: format!("record {} ends inside {what}", self.read),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<()> {
        let start = self.buf.len();
        self.buf.resize(start + n, 0);
        match self.input.read_exact(&mut self.buf[start..]) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(self.truncated(what)),
            Err(e) => Err(CueError::io(&self.path, e)),
        }
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        self.take(4, what)?;
        let s = self.buf.len() - 4;
        Ok(u32::from_le_bytes(
            self.buf[s..].try_into().expect("4 bytes"),
        ))
    }

    fn take_varint(&mut self, what: &str) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            self.take(1, what)?;
            let b = *self.buf.last().expect("one byte");
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(CueError::Mismatch(format!("varint overflow in {what}")))
    }

    fn take_str(&mut self, what: &str) -> Result<String> {
        let len = self.take_u32(what)? as usize;
        self.take(len, what)?;
        let s = self.buf.len() - len;
        String::from_utf8(self.buf[s..].to_vec())
            .map_err(|_| CueError::Mismatch(format!("{what} is not valid UTF-8")))
    }

    /// Returns true on a clean end of file at a record boundary.
    fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        loop {
            match self.input.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => {
                    self.buf.clear();
                    self.buf.push(probe[0]);
                    return Ok(false);
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(CueError::io(&self.path, e)),
            }
        }
    }

    fn next_record(&mut self) -> Result<Option<ActivationRecord>> {
        if self.at_eof()? {
            if self.read < self.manifest.record_count {
                return Err(CueError::Truncated {
                    path: self.path.clone(),
                    reason: format!(
                        "manifest declares {} records, file holds {}",
                        self.manifest.record_count, self.read
                    ),
                });
            }
            return Ok(None);
        }
        if self.read >= self.manifest.record_count {
            return Err(CueError::Mismatch(format!(
                "{} holds more records than the manifest's {}",
                self.path.display(),
                self.manifest.record_count
            )));
        }
        // The probe byte is the first byte of the id length.
        self.take(3, "assertion id length")?;
        let id_len = u32::from_le_bytes(self.buf[0..4].try_into().expect("4 bytes")) as usize;
        self.take(id_len, "assertion id")?;
        let assertion_id = String::from_utf8(self.buf[4..].to_vec())
            .map_err(|_| CueError::Mismatch("assertion id is not valid UTF-8".into()))?;
        let label = self.take_str("label")?;
        let n_blocks = self.take_varint("layer block count")?;
        let mut rec = ActivationRecord::new(assertion_id, label);
        for _ in 0..n_blocks {
            let layer = self.take_u32("layer id")?;
            let count = self.take_varint("entry count")?;
            let mut entries = Vec::with_capacity(count.min(1 << 20) as usize);
            for _ in 0..count {
                let i = self.take_u32("entry index")?;
                let v = f32::from_bits(self.take_u32("entry value")?);
                entries.push((i, v));
            }
            let acts = LayerActivations::from_entries(entries)
                .map_err(|e| CueError::Mismatch(format!("record {}: {e}", self.read)))?;
            if rec.per_layer.insert(layer, acts).is_some() {
                return Err(CueError::Mismatch(format!(
                    "record {} repeats layer {layer}",
                    self.read
                )));
            }
        }
        let expected = crc32fast::hash(&self.buf);
        let mut crc = [0u8; 4];
        match self.input.read_exact(&mut crc) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
                return Err(self.truncated("checksum"))
            }
            Err(e) => return Err(CueError::io(&self.path, e)),
        }
        if u32::from_le_bytes(crc) != expected {
            return Err(CueError::Checksum {
                path: self.path.clone(),
                record: self.read as usize,
            });
        }
        self.manifest.check_record(&rec)?;
        self.read += 1;
        Ok(Some(rec))
    }
}

impl Iterator for DumpReader {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}
