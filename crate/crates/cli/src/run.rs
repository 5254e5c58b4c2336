// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, input/output hashing and the per-command run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use cuekit::eval::Condition;
use cuekit::selection::QuantizationScheme;
use cuekit::CueError;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug)]
pub enum CliError {
    /// Flag or configuration value rejected before any work started.
    Config(String),
    Core(CueError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Core(e) => e.fmt(f),
        }
    }
}

impl From<CueError> for CliError {
    fn from(e: CueError) -> Self {
        Self::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Everything that determines a command's outputs besides its input files.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub decoders: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub rho: f64,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub layer_stride: u32,
    pub scheme: String,
    pub target: Option<String>,
    pub condition: Option<String>,
    /// Command-specific flags.
    pub stage: BTreeMap<String, serde_json::Value>,
}

impl RunConfig {
    fn validate(&self) -> CliResult<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(CliError::Config(format!(
                "--rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        if self.alphas.is_empty() {
            return Err(CliError::Config("--alphas is empty".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(CliError::Config(format!(
                "--alphas must be finite and non-negative, got {a}"
            )));
        }
        if self.layer_stride == 0 {
            return Err(CliError::Config("--layer-stride must be at least 1".into()));
        }
        self.quantization()?;
        self.condition()?;
        Ok(())
    }

    pub fn quantization(&self) -> CliResult<QuantizationScheme> {
        QuantizationScheme::parse(&self.scheme)
            .map_err(|e| CliError::Config(format!("--scheme: {e}")))
    }

    pub fn condition(&self) -> CliResult<Option<Condition>> {
        self.condition
            .as_deref()
            .map(|c| {
                c.parse()
                    .map_err(|e| CliError::Config(format!("--condition: {e}")))
            })
            .transpose()
    }

    /// Alphas in ascending order without duplicates.
    pub fn sorted_alphas(&self) -> Vec<f64> {
        let mut a = self.alphas.clone();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a
    }
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    format: &'static str,
    tool_version: &'static str,
    command: &'a str,
    config_hash: &'a str,
    config: &'a RunConfig,
    inputs: &'a [FileHash],
    outputs: Vec<FileHash>,
}

/// One command invocation: resolved paths plus the files it touched.
pub struct Run {
    pub config: RunConfig,
    config_hash: String,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(
        mut config: RunConfig,
        command: &str,
        stage: BTreeMap<String, serde_json::Value>,
    ) -> CliResult<Self> {
        config.command = command.to_owned();
        config.stage = stage;
        config.validate()?;
        let bytes = serde_json::to_vec(&config).expect("config serializes");
        let config_hash = hex::encode(Sha256::digest(&bytes));
        fs::create_dir_all(&config.out).map_err(|e| io_err(&config.out, e))?;
        Ok(Self {
            config,
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.out.join(rel)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.config
            .corpus
            .clone()
            .unwrap_or_else(|| self.out("corpus.tsv"))
    }

    pub fn dump_path(&self) -> PathBuf {
        self.config.dump.clone().unwrap_or_else(|| self.out("dump"))
    }

    pub fn decoders_path(&self) -> PathBuf {
        self.config
            .decoders
            .clone()
            .unwrap_or_else(|| self.out("decoders"))
    }

    pub fn world_path(&self) -> PathBuf {
        self.config
            .world
            .clone()
            .unwrap_or_else(|| self.out("world.json"))
    }

    /// Requires `path` to exist and records the hash of every file under it.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        if !path.exists() {
            return Err(CueError::MissingInput(path.to_path_buf()).into());
        }
        for f in files_under(path)? {
            self.inputs.push(FileHash {
                path: f.display().to_string(),
                sha256: hash_file(&f)?,
            });
        }
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Hashes the outputs and writes `<out>/manifests/<command>.json`.
    pub fn finish(self) -> CliResult<()> {
        let mut outputs = Vec::new();
        for p in &self.outputs {
            for f in files_under(p)? {
                outputs.push(FileHash {
                    path: f.display().to_string(),
                    sha256: hash_file(&f)?,
                });
            }
        }
        let manifest = RunManifest {
            format: "cuekit-run",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: &self.config.command,
            config_hash: &self.config_hash,
            config: &self.config,
            inputs: &self.inputs,
            outputs,
        };
        let dir = self.out(MANIFEST_DIR);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join(format!("{}.json", self.config.command));
        write_json(&path, &manifest)
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(CueError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| {
        CliError::Core(CueError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `path` itself if it is a file, else every file below it in sorted order.
fn files_under(path: &Path) -> CliResult<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_err(path, err)))
        .collect::<CliResult<_>>()?;
    entries.sort();
    for e in entries {
        out.extend(files_under(&e)?);
    }
    Ok(out)
}
