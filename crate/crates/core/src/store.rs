//! Checkpoint files, run manifests, and metric streams.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "MOTC" | u32 version | u32 n | n bytes of model config JSON | u64 config hash
//! u32 segment count, then per segment:
//!     u16 n | n bytes name | u64 offset | u8 ndim | ndim x u64 dims | u8 dtype (0 = f32)
//! u64 value count | values as f32
//! u64 checksum of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::params::{ParameterVector, Segment};
use crate::seed::{digest64, hex64};
use crate::task::TaskConfig;
use crate::teacher::TeacherSpec;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MOTC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_ROOT_ENV: &str = "MOT_RUN_ROOT";

/// Canonical byte encoding; equal parameters give equal bytes.
pub fn encode_checkpoint(params: &ParameterVector) -> Vec<u8> {
    let config = params.config.canonical_json();
    let mut b = Vec::with_capacity(64 + config.len() + params.values.len() * 4 + params.segments.len() * 48);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&(config.len() as u32).to_le_bytes());
    b.extend_from_slice(config.as_bytes());
    b.extend_from_slice(&params.config_hash.to_le_bytes());
    b.extend_from_slice(&(params.segments.len() as u32).to_le_bytes());
    for s in &params.segments {
        b.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        b.extend_from_slice(s.name.as_bytes());
        b.extend_from_slice(&(s.offset as u64).to_le_bytes());
        b.push(s.shape.len() as u8);
        for &d in &s.shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        b.push(DTYPE_F32);
    }
    b.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = digest64(&b);
    b.extend_from_slice(&checksum.to_le_bytes());
    b
}

/// The digest a saved copy of `params` would carry.
pub fn checkpoint_digest(params: &ParameterVector) -> String {
    let bytes = encode_checkpoint(params);
    hex64(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterVector> {
    if bytes.len() < 12 {
        return Err(Error::Corruption("checkpoint is truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if digest64(body) != stored {
        return Err(Error::Corruption("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corruption("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible { expected: format!("format {FORMAT_VERSION}"), found: format!("format {version}") });
    }
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Corruption(format!("unreadable config block: {e}")))?;
    let hash = r.u64()?;
    if hash != config.hash() {
        return Err(Error::Corruption("config hash does not match config block".into()));
    }
    let count = r.u32()? as usize;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Corruption("segment name is not UTF-8".into()))?;
        let offset = r.u64()? as usize;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if r.u8()? != DTYPE_F32 {
            return Err(Error::Corruption(format!("segment {name} has an unknown dtype")));
        }
        segments.push(Segment { name, offset, shape });
    }
    if segments != config.segments() {
        return Err(Error::Corruption("segment directory does not match the model config".into()));
    }
    let n_values = r.u64()? as usize;
    let raw = r.take(n_values.checked_mul(4).ok_or_else(|| Error::Corruption("value count overflow".into()))?)?;
    if r.pos != body.len() {
        return Err(Error::Corruption("trailing bytes after values".into()));
    }
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let params = ParameterVector { values, segments, config_hash: hash, config };
    params.validate().map_err(|e| Error::Corruption(e.to_string()))?;
    Ok(params)
}

/// Writes atomically through a temporary file; returns the digest.
pub fn save_checkpoint(params: &ParameterVector, path: &Path) -> Result<String> {
    params.validate()?;
    let bytes = encode_checkpoint(params);
    write_atomic(path, &bytes)?;
    Ok(hex64(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"))))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterVector> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and requires the file to belong to `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ParameterVector> {
    let p = load_checkpoint(path)?;
    if p.config_hash != expected.hash() {
        return Err(Error::Incompatible { expected: hex64(expected.hash()), found: hex64(p.config_hash) });
    }
    Ok(p)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "MOT")]
    Mot,
    #[serde(rename = "STD")]
    Std,
    #[serde(rename = "MTD")]
    Mtd,
    #[serde(rename = "SELF")]
    SelfDistill,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Mot => "MOT",
            Regime::Std => "STD",
            Regime::Mtd => "MTD",
            Regime::SelfDistill => "SELF",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub label: String,
    /// Sequential optimization steps behind this checkpoint.
    pub step: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Optimizer steps summed over every branch.
    pub branch_steps: usize,
    /// Steps along the longest sequential chain.
    pub sequential_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub regime: Regime,
    pub tool_version: String,
    pub seed_root: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: crate::orchestrator::RoundSchedule,
    #[serde(default)]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub teachers: Vec<TeacherSpec>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    pub base_digest: String,
    pub corpus_digests: BTreeMap<String, String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub budget: Budget,
    /// Input files used to build the run, by role.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<RunManifest> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        RunManifest::from_json(&fs::read_to_string(path)?)
    }

    /// Labels whose digests differ between two manifests, plus labels only one has.
    pub fn digest_mismatches(&self, other: &RunManifest) -> Vec<String> {
        let a: BTreeMap<_, _> = self.checkpoints.iter().map(|c| (&c.label, &c.digest)).collect();
        let b: BTreeMap<_, _> = other.checkpoints.iter().map(|c| (&c.label, &c.digest)).collect();
        let mut out: Vec<String> = a.iter().filter(|(l, d)| b.get(*l) != Some(*d)).map(|(l, _)| l.to_string()).collect();
        out.extend(b.keys().filter(|l| !a.contains_key(*l)).map(|l| l.to_string()));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    TrainLoss,
    Eval,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub stream: Stream,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub payload: serde_json::Value,
}

/// Append-only JSONL metric stream.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<MetricsWriter> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(MetricsWriter { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// The run-directory root: `$MOT_RUN_ROOT`, else `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path, run_id: &str) -> Result<RunDir> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::Config(format!("invalid run id `{run_id}`")));
        }
        Ok(RunDir { root: root.join(run_id) })
    }

    pub fn open(path: &Path) -> RunDir {
        RunDir { root: path.to_path_buf() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(self.root.join("checkpoints"))?;
        Ok(())
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{label}.motc"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}
