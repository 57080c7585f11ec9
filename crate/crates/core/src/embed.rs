//! Embedding vectors, interchange files and class-embedding aggregation.
//!
//! Two on-disk forms carry the same content:
//!
//! * text: line-delimited JSON, a header line followed by one
//!   `{"id", "label", "vector"}` record per line;
//! * binary: a packed little-endian `f32` payload (`*.bin`) with a JSON
//!   sidecar (`*.bin.json`) holding the header and the record ids/labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;

pub const FORMAT_TAG: &str = "hier-embed";
pub const FORMAT_VERSION: u32 = 1;

/// Norm below which a vector cannot be normalized.
pub const ZERO_NORM: f64 = 1e-12;
/// Allowed deviation from unit norm for vectors declared normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector contains NaN or infinite components")]
    NonFinite,
    #[error("vector has no components")]
    EmptyVector,
    #[error("no vectors to aggregate")]
    EmptyList,
    #[error("vectors cancel out: mean has zero norm")]
    DegenerateAggregate,
    #[error("dimension mismatch in `{id}`: expected {expected}, found {found}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("file truncated: header declares {expected} records, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("header declares {expected} records but payload has {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("unknown embedding file format `{format}` version {version}")]
    UnknownVersion { format: String, version: u32 },
    #[error("`{id}` is not unit-norm (norm {norm})")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("label `{label}` of `{id}` is not a class of the hierarchy")]
    UnknownLabel { id: String, label: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl EmbedError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroVector => "ZeroVector",
            Self::NonFinite => "NonFinite",
            Self::EmptyVector => "EmptyVector",
            Self::EmptyList => "EmptyList",
            Self::DegenerateAggregate => "DegenerateAggregate",
            Self::DimMismatch { .. } => "DimMismatch",
            Self::TruncatedFile { .. } => "TruncatedFile",
            Self::CountMismatch { .. } => "CountMismatch",
            Self::UnknownVersion { .. } => "UnknownVersion",
            Self::NotUnitNorm { .. } => "NotUnitNorm",
            Self::UnknownLabel { .. } => "UnknownLabel",
            Self::Malformed { .. } => "Malformed",
            Self::Io { .. } => "Io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A finite, non-empty `f32` vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f32>::deserialize(d)?;
        EmbeddingVector::new(v).map_err(serde::de::Error::custom)
    }
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn normalized_f64(v: &[f32]) -> Result<Vec<f64>, EmbedError> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if norm < ZERO_NORM {
        return Err(EmbedError::ZeroVector);
    }
    Ok(v.iter().map(|&x| f64::from(x) / norm).collect())
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbedError> {
    let unit = normalized_f64(&v.0)?;
    Ok(EmbeddingVector(unit.into_iter().map(|x| x as f32).collect()))
}

/// Normalize each vector, average, normalize again.
pub fn aggregate_class_embedding(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::EmptyList)?;
    let dim = first.dim();
    let mut mean = vec![0f64; dim];
    for (i, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(EmbedError::DimMismatch {
                id: format!("#{i}"),
                expected: dim,
                found: v.dim(),
            });
        }
        for (m, x) in mean.iter_mut().zip(normalized_f64(&v.0)?) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ZERO_NORM {
        return Err(EmbedError::DegenerateAggregate);
    }
    Ok(EmbeddingVector(
        mean.into_iter().map(|x| (x / norm) as f32).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub normalized: bool,
}

impl EmbeddingHeader {
    fn check_version(&self) -> Result<(), EmbedError> {
        if self.format != FORMAT_TAG || self.version != FORMAT_VERSION {
            return Err(EmbedError::UnknownVersion {
                format: self.format.clone(),
                version: self.version,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordMeta {
    id: String,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BinarySidecar {
    #[serde(flatten)]
    header: EmbeddingHeader,
    records: Vec<RecordMeta>,
}

/// A validated set of labelled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    header: EmbeddingHeader,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    /// `normalized` declares every vector unit-norm; it is checked.
    pub fn new(records: Vec<EmbeddingRecord>, normalized: bool) -> Result<Self, EmbedError> {
        let dim = records.first().map_or(0, |r| r.vector.dim());
        for r in &records {
            if r.vector.dim() != dim {
                return Err(EmbedError::DimMismatch {
                    id: r.id.clone(),
                    expected: dim,
                    found: r.vector.dim(),
                });
            }
            if normalized && !r.vector.is_unit() {
                return Err(EmbedError::NotUnitNorm {
                    id: r.id.clone(),
                    norm: r.vector.norm(),
                });
            }
        }
        Ok(Self {
            header: EmbeddingHeader {
                format: FORMAT_TAG.to_string(),
                version: FORMAT_VERSION,
                dim,
                count: records.len(),
                normalized,
            },
            records,
        })
    }

    pub fn header(&self) -> &EmbeddingHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    fn from_parts(header: EmbeddingHeader, records: Vec<EmbeddingRecord>) -> Result<Self, EmbedError> {
        header.check_version()?;
        if records.len() < header.count {
            return Err(EmbedError::TruncatedFile {
                expected: header.count,
                found: records.len(),
            });
        }
        if records.len() > header.count {
            return Err(EmbedError::CountMismatch {
                expected: header.count,
                found: records.len(),
            });
        }
        for r in &records {
            if r.vector.dim() != header.dim {
                return Err(EmbedError::DimMismatch {
                    id: r.id.clone(),
                    expected: header.dim,
                    found: r.vector.dim(),
                });
            }
        }
        let file = Self::new(records, header.normalized)?;
        Ok(file)
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EmbedError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or(EmbedError::TruncatedFile {
            expected: 1,
            found: 0,
        })?;
        let header: EmbeddingHeader = serde_json::from_str(head).map_err(|e| EmbedError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?;
        header.check_version()?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str::<EmbeddingRecord>(l).map_err(|e| EmbedError::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(header, records)
    }

    /// Sidecar JSON and packed little-endian payload.
    pub fn to_binary(&self) -> (String, Vec<u8>) {
        let sidecar = BinarySidecar {
            header: self.header.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordMeta {
                    id: r.id.clone(),
                    label: r.label.clone(),
                })
                .collect(),
        };
        let mut payload = Vec::with_capacity(self.records.len() * self.header.dim * 4);
        for r in &self.records {
            for &x in r.vector.as_slice() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut json = serde_json::to_string(&sidecar).expect("sidecar serializes");
        json.push('\n');
        (json, payload)
    }

    pub fn from_binary(sidecar: &str, payload: &[u8]) -> Result<Self, EmbedError> {
        let probe: serde_json::Value = serde_json::from_str(sidecar).map_err(|e| EmbedError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?;
        let header: EmbeddingHeader =
            serde_json::from_value(probe.clone()).map_err(|e| EmbedError::Malformed {
                line: 1,
                reason: e.to_string(),
            })?;
        header.check_version()?;
        let sidecar: BinarySidecar = serde_json::from_value(probe).map_err(|e| EmbedError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?;
        let header = sidecar.header;
        if sidecar.records.len() != header.count {
            return Err(EmbedError::CountMismatch {
                expected: header.count,
                found: sidecar.records.len(),
            });
        }
        let row_bytes = header.dim * 4;
        let expected = header.count * row_bytes;
        if payload.len() < expected {
            return Err(EmbedError::TruncatedFile {
                expected: header.count,
                found: payload.len().checked_div(row_bytes).unwrap_or(0),
            });
        }
        if payload.len() > expected {
            return Err(EmbedError::CountMismatch {
                expected: header.count,
                found: payload.len().checked_div(row_bytes).unwrap_or(0),
            });
        }
        let mut records = Vec::with_capacity(header.count);
        for (meta, row) in sidecar.records.into_iter().zip(payload.chunks_exact(row_bytes.max(1))) {
            let values = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.push(EmbeddingRecord {
                id: meta.id,
                label: meta.label,
                vector: EmbeddingVector::new(values)?,
            });
        }
        Self::from_parts(header, records)
    }

    /// Writes the binary form when `path` ends in `.bin`, the text form otherwise.
    pub fn store(&self, path: &Path) -> Result<(), EmbedError> {
        if is_binary(path) {
            let (sidecar, payload) = self.to_binary();
            write_file(&sidecar_path(path), sidecar.as_bytes())?;
            write_file(path, &payload)
        } else {
            write_file(path, self.to_text().as_bytes())
        }
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        if is_binary(path) {
            let side = sidecar_path(path);
            let sidecar = fs::read_to_string(&side).map_err(io_err(&side))?;
            let payload = fs::read(path).map_err(io_err(path))?;
            Self::from_binary(&sidecar, &payload)
        } else {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Self::from_text(&text)
        }
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EmbedError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub label: String,
    /// Position of `label` in the hierarchy's leaf order.
    pub class: usize,
    pub vector: EmbeddingVector,
}

/// Labelled, unit-norm image embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEmbeddingSet {
    records: Vec<ImageRecord>,
}

impl ImageEmbeddingSet {
    /// Resolves labels against the hierarchy. Vectors in a file not declared
    /// normalized are normalized here.
    pub fn from_file(file: EmbeddingFile, h: &LabelHierarchy) -> Result<Self, EmbedError> {
        let normalized = file.header().normalized;
        let records = file
            .into_records()
            .into_iter()
            .map(|r| {
                let class = h.class_index(&r.label).map_err(|_| EmbedError::UnknownLabel {
                    id: r.id.clone(),
                    label: r.label.clone(),
                })?;
                let vector = if normalized { r.vector } else { l2_normalize(&r.vector)? };
                Ok(ImageRecord {
                    image_id: r.id,
                    label: r.label,
                    class,
                    vector,
                })
            })
            .collect::<Result<Vec<_>, EmbedError>>()?;
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
