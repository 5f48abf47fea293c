//! Embedding stores: the on-disk format, validation, dataset partitions and
//! norm diagnostics.
//!
//! A store is a pair of files. The matrix file starts with a fixed 18-byte
//! header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `EMBS`                            |
//! | 4      | 4    | version, u32 LE (= 1)                   |
//! | 8      | 4    | row count `n`, u32 LE                   |
//! | 12     | 4    | dimension `dim`, u32 LE                 |
//! | 16     | 1    | normalized flag (0/1)                   |
//! | 17     | 1    | token scheme (0 = whitespace, 1 = model)|
//!
//! followed by `n * dim` little-endian `f32` values in row-major order. The
//! metadata sidecar shares the basename with a `.meta.jsonl` extension and
//! holds one [`SentenceRecord`] per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMBS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 18;

/// Tolerance on row norms for stores flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScheme {
    /// Lowercased whitespace-and-punctuation split, see [`tokenize`].
    #[default]
    Whitespace,
    /// Tokens supplied by the embedding model's tokenizer.
    Model,
}

impl TokenScheme {
    fn to_byte(self) -> u8 {
        match self {
            TokenScheme::Whitespace => 0,
            TokenScheme::Model => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(TokenScheme::Whitespace),
            1 => Some(TokenScheme::Model),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: u64,
    pub dataset: String,
    pub text: String,
    pub tokens: Vec<String>,
    /// Id of this sentence in the store it was derived from, when this store
    /// is a partition or a trimmed copy. Absent means "same as `id`".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<u64>,
}

impl SentenceRecord {
    pub fn new(id: u64, dataset: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        SentenceRecord {
            id,
            dataset: dataset.into(),
            text,
            tokens,
            origin: None,
        }
    }

    pub fn origin_id(&self) -> u64 {
        self.origin.unwrap_or(self.id)
    }
}

/// Lowercases `text` and splits it into word tokens (runs of alphanumerics
/// and `_`) and single-character punctuation tokens. Whitespace separates
/// tokens and is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// An immutable `n x dim` matrix of sentence embeddings with aligned
/// metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    matrix: Vec<f32>,
    records: Vec<SentenceRecord>,
    normalized: bool,
    token_scheme: TokenScheme,
}

impl EmbeddingStore {
    /// Builds a store, checking every invariant. Record ids must be dense
    /// `0..n` in order.
    pub fn new(
        dim: usize,
        matrix: Vec<f32>,
        records: Vec<SentenceRecord>,
        normalized: bool,
        token_scheme: TokenScheme,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::MalformedHeader("dimension must be positive".into()));
        }
        if matrix.len() % dim != 0 {
            return Err(Error::MalformedHeader(format!(
                "matrix length {} is not a multiple of dim {dim}",
                matrix.len()
            )));
        }
        let n = matrix.len() / dim;
        if n != records.len() {
            return Err(Error::RowCountMismatch {
                header: n,
                metadata: records.len(),
            });
        }
        if let Some(pos) = matrix.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                column: pos % dim,
            });
        }
        for (i, r) in records.iter().enumerate() {
            if r.id != i as u64 {
                return Err(Error::InvalidMetadata {
                    line: i + 1,
                    message: format!("expected id {i}, found {}", r.id),
                });
            }
            if !r.text.trim().is_empty() && r.tokens.is_empty() {
                return Err(Error::InvalidMetadata {
                    line: i + 1,
                    message: "non-empty text with no tokens".into(),
                });
            }
        }
        let store = EmbeddingStore {
            dim,
            matrix,
            records,
            normalized,
            token_scheme,
        };
        if normalized {
            for i in 0..n {
                let norm = row_norm(store.row(i));
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::InvalidArgument(format!(
                        "store flagged normalized but row {i} has norm {norm}"
                    )));
                }
            }
        }
        Ok(store)
    }

    /// Store whose rows all belong to `dataset` and carry no text.
    pub fn unlabeled(dim: usize, matrix: Vec<f32>, dataset: &str) -> Result<Self> {
        let n = if dim == 0 { 0 } else { matrix.len() / dim };
        let records = (0..n as u64)
            .map(|i| SentenceRecord::new(i, dataset, ""))
            .collect();
        Self::new(dim, matrix, records, false, TokenScheme::Whitespace)
    }

    /// Convenience constructor from row vectors, one dataset tag per row.
    pub fn from_rows(rows: &[Vec<f32>], datasets: &[&str]) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.len() != datasets.len() {
            return Err(Error::RowCountMismatch {
                header: rows.len(),
                metadata: datasets.len(),
            });
        }
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            matrix.extend_from_slice(row);
        }
        let records = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| SentenceRecord::new(i as u64, *d, ""))
            .collect();
        Self::new(dim, matrix, records, false, TokenScheme::Whitespace)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn token_scheme(&self) -> TokenScheme {
        self.token_scheme
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.matrix.chunks_exact(self.dim)
    }

    pub fn records(&self) -> &[SentenceRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &SentenceRecord {
        &self.records[i]
    }

    /// Distinct dataset tags in order of first appearance.
    pub fn datasets(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.records {
            if !seen.iter().any(|d| d == &r.dataset) {
                seen.push(r.dataset.clone());
            }
        }
        seen
    }

    /// The single dataset tag shared by every row, or the tags joined with
    /// `+` when the store mixes datasets.
    pub fn dataset_label(&self) -> String {
        self.datasets().join("+")
    }

    /// Copy of the selected rows with ids re-densified and the originating
    /// ids kept in [`SentenceRecord::origin`].
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut matrix = Vec::with_capacity(indices.len() * self.dim);
        let mut records = Vec::with_capacity(indices.len());
        for (new_id, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::OutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            matrix.extend_from_slice(self.row(i));
            let src = &self.records[i];
            records.push(SentenceRecord {
                id: new_id as u64,
                dataset: src.dataset.clone(),
                text: src.text.clone(),
                tokens: src.tokens.clone(),
                origin: Some(src.origin_id()),
            });
        }
        Ok(EmbeddingStore {
            dim: self.dim,
            matrix,
            records,
            normalized: self.normalized,
            token_scheme: self.token_scheme,
        })
    }

    /// Rows tagged `dataset`, as a new store.
    pub fn partition(&self, dataset: &str) -> Result<Self> {
        let indices: Vec<usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.dataset == dataset)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::UnknownDataset(dataset.to_string()));
        }
        self.subset(&indices)
    }

    /// One partition per dataset, in order of first appearance.
    pub fn partitions(&self) -> Result<Vec<(String, Self)>> {
        self.datasets()
            .into_iter()
            .map(|d| {
                let p = self.partition(&d)?;
                Ok((d, p))
            })
            .collect()
    }

    /// Concatenates stores with equal dimension, re-densifying ids. Each row
    /// keeps its originating id from the store it came from.
    pub fn concat(stores: &[EmbeddingStore]) -> Result<Self> {
        let first = stores.first().ok_or(Error::EmptyStore)?;
        let mut matrix = Vec::new();
        let mut records = Vec::new();
        for s in stores {
            if s.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    actual: s.dim,
                });
            }
            matrix.extend_from_slice(&s.matrix);
            for r in &s.records {
                let mut r = r.clone();
                r.origin = Some(r.origin_id());
                r.id = records.len() as u64;
                records.push(r);
            }
        }
        let normalized = stores.iter().all(|s| s.normalized);
        Self::new(first.dim, matrix, records, normalized, first.token_scheme)
    }

    /// Copy with every row scaled to unit Euclidean norm.
    pub fn to_normalized(&self) -> Result<Self> {
        let mut matrix = self.matrix.clone();
        for (i, row) in matrix.chunks_exact_mut(self.dim).enumerate() {
            let norm = row_norm(row);
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has zero norm and cannot be normalized"
                )));
            }
            for x in row.iter_mut() {
                *x = (f64::from(*x) / norm) as f32;
            }
        }
        Self::new(
            self.dim,
            matrix,
            self.records.clone(),
            true,
            self.token_scheme,
        )
    }
}

/// Euclidean norm with left-to-right `f64` accumulation.
pub fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .fold(0.0f64, |acc, &x| acc + f64::from(x) * f64::from(x))
        .sqrt()
}

/// Sidecar metadata path for a matrix file: `foo.embs` -> `foo.meta.jsonl`.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("meta.jsonl")
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let n = u32::try_from(store.len())
        .map_err(|_| Error::InvalidArgument("too many rows for u32 header".into()))?;
    let dim = u32::try_from(store.dim)
        .map_err(|_| Error::InvalidArgument("dimension too large for u32 header".into()))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&n.to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    header.push(u8::from(store.normalized));
    header.push(store.token_scheme.to_byte());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for x in &store.matrix {
        w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = metadata_path(path);
    let file = File::create(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut w = BufWriter::new(file);
    for r in &store.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&meta, e))?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

struct Header {
    n: usize,
    dim: usize,
    normalized: bool,
    scheme: TokenScheme,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let n = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    if dim == 0 {
        return Err(Error::MalformedHeader("dimension must be positive".into()));
    }
    let normalized = match bytes[16] {
        0 => false,
        1 => true,
        b => {
            return Err(Error::MalformedHeader(format!(
                "invalid normalized flag {b}"
            )))
        }
    };
    let scheme = TokenScheme::from_byte(bytes[17])
        .ok_or_else(|| Error::MalformedHeader(format!("invalid token scheme {}", bytes[17])))?;
    Ok(Header {
        n,
        dim,
        normalized,
        scheme,
    })
}

fn parse_body(header: &Header, bytes: &[u8]) -> Result<Vec<f32>> {
    let expected = header
        .n
        .checked_mul(header.dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("matrix size overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::MalformedHeader(format!(
            "header declares {} x {} floats ({expected} bytes) but body has {} bytes",
            header.n,
            header.dim,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = read_all(path)?;
    let header = parse_header(&bytes)?;
    let matrix = parse_body(&header, &bytes)?;

    let meta = metadata_path(path);
    let file = File::open(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut records = Vec::with_capacity(header.n);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&meta, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SentenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::InvalidMetadata {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    if records.len() != header.n {
        return Err(Error::RowCountMismatch {
            header: header.n,
            metadata: records.len(),
        });
    }
    EmbeddingStore::new(
        header.dim,
        matrix,
        records,
        header.normalized,
        header.scheme,
    )
}

/// Reads a bare embedding matrix for ingestion: either an `EMBS` file (its
/// sidecar, if any, is ignored) or a text file with one row per line and
/// values separated by whitespace or commas. Returns `(dim, values)`.
pub fn read_matrix(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = read_all(path)?;
    if bytes.starts_with(MAGIC) {
        let header = parse_header(&bytes)?;
        let matrix = parse_body(&header, &bytes)?;
        return Ok((header.dim, matrix));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::MalformedHeader("embedding file is neither EMBS nor UTF-8".into()))?;
    let mut dim = None;
    let mut values = Vec::new();
    for (row, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let start = values.len();
        for (column, field) in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .enumerate()
        {
            let x: f32 = field.parse().map_err(|_| {
                Error::MalformedHeader(format!("row {row}: cannot parse {field:?} as a float"))
            })?;
            if !x.is_finite() {
                return Err(Error::NonFinite { row, column });
            }
            values.push(x);
        }
        let width = values.len() - start;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: width,
                })
            }
            _ => {}
        }
    }
    let dim = dim.ok_or(Error::EmptyStore)?;
    Ok((dim, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub rows: usize,
    pub dim: usize,
    pub mean_norm: f64,
    pub median_norm: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    pub value_min: f64,
    pub value_max: f64,
    pub frac_values_outside_unit: f64,
}

pub fn norm_diagnostics(store: &EmbeddingStore) -> Result<NormReport> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let norms: Vec<f64> = store.rows().map(row_norm).collect();
    let n = norms.len();
    let mean_norm = norms.iter().fold(0.0, |a, &x| a + x) / n as f64;
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let median_norm = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mut value_min = f64::INFINITY;
    let mut value_max = f64::NEG_INFINITY;
    let mut outside = 0usize;
    for &x in store.matrix() {
        let x = f64::from(x);
        value_min = value_min.min(x);
        value_max = value_max.max(x);
        if x.abs() > 1.0 {
            outside += 1;
        }
    }
    Ok(NormReport {
        rows: n,
        dim: store.dim(),
        mean_norm,
        median_norm,
        min_norm: sorted[0],
        max_norm: sorted[n - 1],
        value_min,
        value_max,
        frac_values_outside_unit: outside as f64 / store.matrix().len() as f64,
    })
}

/// Count of rows per dataset tag.
pub fn dataset_sizes(store: &EmbeddingStore) -> HashMap<String, usize> {
    let mut sizes = HashMap::new();
    for r in store.records() {
        *sizes.entry(r.dataset.clone()).or_insert(0) += 1;
    }
    sizes
}
