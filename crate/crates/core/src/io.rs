//! On-disk formats: embeddings, annotations, checkpoints, scores and selections.
//!
//! All binary integers and floats are little-endian.
//!
//! Embedding file (`EVSB`), one matrix of `n` rows by `d` columns:
//!
//! ```text
//! magic  "EVSB"          4 bytes
//! version u32 = 1
//! n       u32
//! d       u32
//! payload n*d f32, row-major
//! checksum u64           wrapping sum of the payload bytes
//! ```
//!
//! A query embedding is an embedding file with `n = 1`.
//!
//! Checkpoint file (`EVCK`):
//!
//! ```text
//! magic  "EVCK"          4 bytes
//! version u32 = 1
//! dim u32, subspaces u32, window u32
//! lambda parameterization u8 (1 = sigmoid of a stored logit)
//! lambda_init f64
//! scorer seed u64
//! training seed u64
//! tensor count u32, then per tensor:
//!   name length u32, name bytes (utf-8), rows u32, cols u32, rows*cols f64
//! checksum u64           wrapping sum of every preceding byte
//! ```
//!
//! Annotations, scores and selections are JSON Lines, one record per line.
//! Blank lines are ignored.
//!
//! Writers go through a temporary file in the target directory and rename it
//! into place, so readers never observe a partial file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::numerics::DenseMatrix;
use crate::scoring::{FrameEmbedding, QueryEmbedding, ScorerConfig, ScorerParams};
use crate::selection::{EvidenceSegment, Selection};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"EVSB";
pub const EMBEDDING_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LAMBDA_SIGMOID_LOGIT: u8 = 1;

const EMBEDDING_HEADER: usize = 16;

/// Wrapping sum of bytes as `u64`.
pub fn additive_checksum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(u64::from(b)))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        let needed = self.pos.checked_add(len).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available: self.bytes.len(),
        })?;
        if needed > self.bytes.len() {
            return Err(FormatError::Truncated {
                needed,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..needed];
        self.pos = needed;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::InvalidArgument(format!("{what} {value} does not fit in u32")))
}

/// Row-major `f32` matrix as stored in an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} embedding matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Narrows each value to `f32`.
    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "row {i} has {} values, expected {cols}",
                rows[i].len()
            )));
        }
        let values = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Widened copies of every row.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    pub fn frame_embeddings(&self) -> Result<Vec<FrameEmbedding>> {
        self.to_f64_rows()
            .into_iter()
            .map(FrameEmbedding::new)
            .collect()
    }

    /// The single row of a query file.
    pub fn query_embedding(&self) -> Result<QueryEmbedding> {
        if self.rows != 1 {
            return Err(Error::Shape(format!(
                "query embedding file holds {} rows, expected 1",
                self.rows
            )));
        }
        QueryEmbedding::new(self.row(0).iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(EMBEDDING_HEADER + 4 * self.values.len() + 8);
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.rows, "row count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.cols, "column count")?.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = additive_checksum(&out[EMBEDDING_HEADER..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != EMBEDDING_MAGIC {
            return Err(FormatError::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let payload_len = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or(FormatError::Truncated {
                needed: usize::MAX,
                available: bytes.len(),
            })?;
        let payload = r.take(payload_len)?;
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        let computed = additive_checksum(payload);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(Self { rows, cols, values })
    }
}

pub fn save_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path, &matrix.to_bytes()?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    Ok(EmbeddingMatrix::from_bytes(&read_file(path)?)?)
}

/// One (query, video) pair with its evidence segments in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub query_id: String,
    pub video_id: String,
    pub fps: f64,
    pub n_frames: usize,
    pub segments: Vec<[f64; 2]>,
}

impl AnnotationRecord {
    pub fn evidence_segments(&self) -> Result<Vec<EvidenceSegment>> {
        self.segments
            .iter()
            .map(|&[s, e]| EvidenceSegment::new(s, e))
            .collect()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("fps must be positive, got {}", self.fps));
        }
        for (j, &[s, e]) in self.segments.iter().enumerate() {
            if let Err(err) = EvidenceSegment::new(s, e) {
                return Err(format!("segment {j}: {err}"));
            }
        }
        Ok(())
    }
}

fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, FormatError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(record, line)| {
            serde_json::from_str(line).map_err(|e| FormatError::Annotation {
                record,
                message: e.to_string(),
            })
        })
        .collect()
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::InvalidArgument(format!("unserializable record: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>, FormatError> {
    let records: Vec<AnnotationRecord> = parse_jsonl(text)?;
    for (record, r) in records.iter().enumerate() {
        r.check()
            .map_err(|message| FormatError::Annotation { record, message })?;
    }
    Ok(records)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    Ok(parse_annotations(&read_text(path)?)?)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    for (record, r) in records.iter().enumerate() {
        r.check()
            .map_err(|message| FormatError::Annotation { record, message })?;
    }
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Per-frame scores for one (query, video) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub query_id: String,
    pub video_id: String,
    pub scores: Vec<f64>,
}

/// Selected frames for one (query, video) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub query_id: String,
    pub video_id: String,
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl SelectionRecord {
    pub fn new(query_id: String, video_id: String, selection: Selection) -> Self {
        Self {
            query_id,
            video_id,
            indices: selection.indices,
            scores: selection.scores,
        }
    }

    pub fn selection(&self) -> Selection {
        Selection {
            indices: self.indices.clone(),
            scores: self.scores.clone(),
        }
    }
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    Ok(parse_jsonl(&read_text(path)?)?)
}

pub fn save_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

pub fn load_selections(path: &Path) -> Result<Vec<SelectionRecord>> {
    Ok(parse_jsonl(&read_text(path)?)?)
}

pub fn save_selections(path: &Path, records: &[SelectionRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Everything needed to rebuild a trained scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ScorerConfig,
    pub params: ScorerParams,
    pub train_seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(c.dim, "dim")?.to_le_bytes());
        out.extend_from_slice(&to_u32(c.subspaces, "subspaces")?.to_le_bytes());
        out.extend_from_slice(&to_u32(c.window, "window")?.to_le_bytes());
        out.push(LAMBDA_SIGMOID_LOGIT);
        out.extend_from_slice(&c.lambda_init.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.train_seed.to_le_bytes());

        let names = ScorerParams::tensor_names(c.subspaces);
        let tensors = self.params.tensors();
        out.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in names.iter().zip(tensors) {
            out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&to_u32(t.value.rows(), "rows")?.to_le_bytes());
            out.extend_from_slice(&to_u32(t.value.cols(), "cols")?.to_le_bytes());
            for v in t.value.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = additive_checksum(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        if bytes.len() < 8 {
            return Err(FormatError::Truncated {
                needed: 8,
                available: bytes.len(),
            }
            .into());
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        let computed = additive_checksum(&bytes[..body_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed }.into());
        }
        let mut r = Reader::new(&bytes[..body_end]);
        r.pos = 8;

        let dim = r.u32()? as usize;
        let subspaces = r.u32()? as usize;
        let window = r.u32()? as usize;
        let tag = r.u8()?;
        if tag != LAMBDA_SIGMOID_LOGIT {
            return Err(FormatError::InvalidConfig(format!(
                "unknown lambda parameterization {tag}"
            ))
            .into());
        }
        let lambda_init = r.f64()?;
        let seed = r.u64()?;
        let train_seed = r.u64()?;
        let config = ScorerConfig {
            dim,
            subspaces,
            window,
            lambda_init,
            seed,
        };
        config
            .validate()
            .map_err(|e| FormatError::InvalidConfig(e.to_string()))?;

        let count = r.u32()? as usize;
        let mut table: HashMap<String, DenseMatrix> = HashMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::InvalidName)?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows.checked_mul(cols).ok_or(FormatError::Truncated {
                needed: usize::MAX,
                available: bytes.len(),
            })?;
            // bound the allocation by what the file can actually hold
            let raw = r.take(n.checked_mul(8).ok_or(FormatError::Truncated {
                needed: usize::MAX,
                available: bytes.len(),
            })?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            if table.contains_key(&name) {
                return Err(FormatError::DuplicateTensor(name).into());
            }
            order.push(name.clone());
            table.insert(name, DenseMatrix::from_vec(rows, cols, values)?);
        }
        if r.pos != body_end {
            return Err(FormatError::TrailingBytes(body_end - r.pos).into());
        }

        let names = ScorerParams::tensor_names(subspaces);
        let shapes = ScorerParams::expected_shapes(&config);
        if let Some(unknown) = order.iter().find(|n| !names.contains(n)) {
            return Err(FormatError::UnknownTensor(unknown.clone()).into());
        }
        let mut values = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(shapes) {
            let m = table
                .remove(name)
                .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            if m.shape() != shape {
                return Err(FormatError::TensorShape {
                    name: name.clone(),
                    expected: shape,
                    found: m.shape(),
                }
                .into());
            }
            values.push(m);
        }
        let params = ScorerParams::from_tensors(&config, values)?;
        Ok(Self {
            config,
            params,
            train_seed,
        })
    }

    /// Fails with [`FormatError::ConfigMismatch`] on the first architecture
    /// field that differs from `expected`.
    pub fn check_config(&self, expected: &ScorerConfig) -> Result<(), FormatError> {
        let c = &self.config;
        let fields: [(&'static str, usize, usize); 3] = [
            ("dim", expected.dim, c.dim),
            ("subspaces", expected.subspaces, c.subspaces),
            ("window", expected.window, c.window),
        ];
        for (field, want, got) in fields {
            if want != got {
                return Err(FormatError::ConfigMismatch {
                    field,
                    expected: want.to_string(),
                    found: got.to_string(),
                });
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

/// Loads a checkpoint and rejects it unless its architecture matches `expected`.
pub fn load_checkpoint_matching(path: &Path, expected: &ScorerConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_config(expected)?;
    Ok(ckpt)
}
