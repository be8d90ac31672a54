//! Run records, attention-trace containers, and linkage hashing.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionTrace};
use crate::perturb::PerturbationKind;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate record for ({instance_id}, {kind}, {shots}, {model_id})")]
    DuplicateKey {
        instance_id: String,
        kind: PerturbationKind,
        shots: u8,
        model_id: String,
    },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("trace blob holds {found} bytes, manifest implies {expected}")]
    ManifestMismatch { expected: u64, found: u64 },
    #[error("not an attention trace container (bad magic)")]
    BadMagic,
    #[error("bad trace manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Trace(#[from] AttentionError),
}

impl StoreError {
    pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
        move |source| StoreError::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, StoreError::Io { .. })
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(StoreError::io_error(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(StoreError::io_error(dir))?;
    tmp.write_all(bytes).map_err(StoreError::io_error(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_owned(),
        source: e.error,
    })?;
    Ok(())
}

/// One model prediction for one (instance, perturbation, shots) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub kind: PerturbationKind,
    pub shots: u8,
    pub model_id: String,
    pub prompt_hash: u64,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<PathBuf>,
}

impl RunRecord {
    fn key(&self) -> (&str, PerturbationKind, u8, &str) {
        (&self.instance_id, self.kind, self.shots, &self.model_id)
    }

    fn duplicate(&self) -> StoreError {
        StoreError::DuplicateKey {
            instance_id: self.instance_id.clone(),
            kind: self.kind,
            shots: self.shots,
            model_id: self.model_id.clone(),
        }
    }
}

fn check_unique_records(records: &[RunRecord]) -> Result<(), StoreError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.key()) {
            return Err(r.duplicate());
        }
    }
    Ok(())
}

pub fn records_to_jsonl(records: &[RunRecord]) -> Result<String, StoreError> {
    check_unique_records(records)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<(), StoreError> {
    write_atomic(path, records_to_jsonl(records)?.as_bytes())
}

/// Parses JSON-lines records; line numbers in errors are 1-based.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<RunRecord>, StoreError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| StoreError::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| StoreError::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((
            record.instance_id.clone(),
            record.kind,
            record.shots,
            record.model_id.clone(),
        )) {
            return Err(record.duplicate());
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
    let file = File::open(path).map_err(StoreError::io_error(path))?;
    parse_records(BufReader::new(file))
}

pub const TRACE_MAGIC: &[u8; 8] = b"ATTNTRC1";
pub const TRACE_DTYPE: &str = "f32";
pub const TRACE_LAYOUT: &str = "layer-major row-major";

/// JSON manifest stored ahead of the float blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub dtype: String,
    pub layout: String,
    pub causal: bool,
    /// Number of leading query rows that belong to the prompt; all rows when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<usize>,
}

impl TraceManifest {
    pub fn blob_len(&self) -> u64 {
        (self.layers as u64) * (self.heads as u64) * (self.seq_len as u64).pow(2) * 4
    }
}

/// Container layout: magic `ATTNTRC1`, manifest length as u64 LE, manifest
/// JSON, then little-endian f32 values ordered `[layer][head][query][key]`.
pub fn encode_trace(trace: &AttentionTrace) -> Vec<u8> {
    let manifest = serde_json::to_vec(&TraceManifest {
        layers: trace.layers(),
        heads: trace.heads(),
        seq_len: trace.seq_len(),
        dtype: TRACE_DTYPE.into(),
        layout: TRACE_LAYOUT.into(),
        causal: trace.is_causal(),
        prompt_len: trace.prompt_len(),
    })
    .expect("manifest serializes");
    let values = trace.values();
    let mut out = Vec::with_capacity(16 + manifest.len() + values.len() * 4);
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_trace(mut reader: impl Read) -> Result<AttentionTrace, StoreError> {
    let short = |_| StoreError::BadMagic;
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(short)?;
    if &magic != TRACE_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let mut len = [0u8; 8];
    reader
        .read_exact(&mut len)
        .map_err(|e| StoreError::BadManifest(e.to_string()))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(StoreError::BadManifest(format!(
            "manifest length {len} is implausible"
        )));
    }
    let mut manifest = vec![0u8; len as usize];
    reader
        .read_exact(&mut manifest)
        .map_err(|e| StoreError::BadManifest(e.to_string()))?;
    let manifest: TraceManifest =
        serde_json::from_slice(&manifest).map_err(|e| StoreError::BadManifest(e.to_string()))?;
    if manifest.dtype != TRACE_DTYPE {
        return Err(StoreError::BadManifest(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    if manifest.layout != TRACE_LAYOUT {
        return Err(StoreError::BadManifest(format!(
            "unsupported layout {:?}",
            manifest.layout
        )));
    }
    let expected = manifest.blob_len();
    let mut blob = Vec::with_capacity(expected.min(1 << 32) as usize);
    reader
        .take(expected + 1)
        .read_to_end(&mut blob)
        .map_err(|e| StoreError::BadManifest(e.to_string()))?;
    if blob.len() as u64 != expected {
        return Err(StoreError::ManifestMismatch {
            expected,
            found: blob.len() as u64,
        });
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    drop(blob);
    let mut trace = AttentionTrace::new(
        manifest.layers,
        manifest.heads,
        manifest.seq_len,
        values,
        manifest.causal,
    )?;
    if let Some(p) = manifest.prompt_len {
        trace = trace.with_prompt_len(p)?;
    }
    Ok(trace)
}

pub fn write_trace(path: &Path, trace: &AttentionTrace) -> Result<(), StoreError> {
    write_atomic(path, &encode_trace(trace))
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace, StoreError> {
    let file = File::open(path).map_err(StoreError::io_error(path))?;
    decode_trace(BufReader::new(file))
}
