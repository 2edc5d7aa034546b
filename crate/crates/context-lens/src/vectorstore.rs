//! Pre-trained word vectors: loading, cosine similarity, nearest neighbors.
//!
//! Two text formats are supported. `word2vec-text` starts with a `"V D"`
//! header line; `glove-text` is the same line format without the header,
//! with the dimension inferred from the first line. Tokens are stored
//! exactly as they appear in the file; case folding is the corpus module's
//! job. All similarity math runs in f64 regardless of file precision.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VectorStoreError {
    #[error("cannot read vector file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vector file is empty")]
    EmptyInput,
    #[error("line {line}: malformed line ({reason})")]
    Parse { line: usize, reason: String },
    #[error("line {line}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: vector has non-finite entries")]
    NonFinite { line: usize },
    #[error("line {line}: vector is all-zero")]
    ZeroVector { line: usize },
    #[error("cosine similarity is undefined for a zero-norm vector")]
    UndefinedSimilarity,
    #[error("vector length {found} does not match store dimension {expected}")]
    QueryDimension { expected: usize, found: usize },
    #[error("requested k={k} exceeds vocabulary size {vocab}")]
    KTooLarge { k: usize, vocab: usize },
    #[error("token not in vocabulary: {0}")]
    UnknownToken(String),
}

/// On-disk layout of a vector file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorFormat {
    /// Header line `"V D"`, then one `token x1 … xD` line per vector.
    Word2vecText,
    /// Same line format, no header; dimension inferred from the first line.
    GloveText,
}

impl fmt::Display for VectorFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorFormat::Word2vecText => write!(f, "word2vec-text"),
            VectorFormat::GloveText => write!(f, "glove-text"),
        }
    }
}

/// What the loader saw: vocabulary size, dimension, duplicates skipped.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub n_tokens: usize,
    pub dim: usize,
    /// Tokens that appeared more than once; the first vector wins.
    pub duplicates: Vec<String>,
}

/// A single token's vector, borrowed from a store.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVector<'a> {
    pub token: &'a str,
    pub values: &'a [f64],
}

/// Immutable vocabulary → vector index. Rows are stored contiguously; row i
/// is the vector of `vocab[i]`.
#[derive(Debug, Clone)]
pub struct VectorStore {
    dim: usize,
    vocab: Vec<String>,
    matrix: Vec<f64>,
    token_index: HashMap<String, usize>,
}

impl VectorStore {
    /// Build a store from parallel token/vector lists. Intended for tests
    /// and synthetic fixtures; file input goes through [`load_vectors`].
    pub fn from_rows<S: Into<String>>(
        rows: impl IntoIterator<Item = (S, Vec<f64>)>,
    ) -> Result<Self, VectorStoreError> {
        let mut store = VectorStore {
            dim: 0,
            vocab: Vec::new(),
            matrix: Vec::new(),
            token_index: HashMap::new(),
        };
        for (line, (token, values)) in rows.into_iter().enumerate() {
            let line = line + 1;
            if store.vocab.is_empty() {
                store.dim = values.len();
            }
            store.push_row(token.into(), &values, line)?;
        }
        if store.vocab.is_empty() {
            return Err(VectorStoreError::EmptyInput);
        }
        Ok(store)
    }

    fn push_row(
        &mut self,
        token: String,
        values: &[f64],
        line: usize,
    ) -> Result<bool, VectorStoreError> {
        if values.len() != self.dim || self.dim == 0 {
            return Err(VectorStoreError::DimensionMismatch {
                line,
                expected: self.dim,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorStoreError::NonFinite { line });
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(VectorStoreError::ZeroVector { line });
        }
        if self.token_index.contains_key(&token) {
            return Ok(false);
        }
        self.token_index.insert(token.clone(), self.vocab.len());
        self.vocab.push(token);
        self.matrix.extend_from_slice(values);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_index.contains_key(token)
    }

    /// Row index of a token, if present.
    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<WordVector<'_>> {
        self.index_of(token).map(|i| WordVector {
            token: &self.vocab[i],
            values: self.row(i),
        })
    }

    /// The `k` vocabulary tokens most similar to `query`, descending by
    /// cosine; ties break by ascending token order. Tokens in `exclude`
    /// are skipped; `k` counts the returned entries after exclusion.
    pub fn nearest(
        &self,
        query: &[f64],
        k: usize,
        exclude: &std::collections::HashSet<String>,
    ) -> Result<Vec<(String, f64)>, VectorStoreError> {
        if query.len() != self.dim {
            return Err(VectorStoreError::QueryDimension {
                expected: self.dim,
                found: query.len(),
            });
        }
        if k > self.vocab.len() {
            return Err(VectorStoreError::KTooLarge {
                k,
                vocab: self.vocab.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(self.vocab.len());
        for i in 0..self.vocab.len() {
            if exclude.contains(&self.vocab[i]) {
                continue;
            }
            scored.push((i, cosine(query, self.row(i))?));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("similarities are finite")
                .then_with(|| self.vocab[a.0].cmp(&self.vocab[b.0]))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.vocab[i].clone(), s))
            .collect())
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped into [-1, 1].
///
/// A zero-norm input is an error, never a silent 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, VectorStoreError> {
    if a.len() != b.len() {
        return Err(VectorStoreError::QueryDimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(VectorStoreError::UndefinedSimilarity);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Load a vector file. Duplicate tokens keep their first vector and are
/// listed in the report.
pub fn load_vectors(
    path: &Path,
    format: VectorFormat,
) -> Result<(VectorStore, LoadReport), VectorStoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let mut declared: Option<(usize, usize)> = None;
    if format == VectorFormat::Word2vecText {
        let (_, first) = lines.next().ok_or(VectorStoreError::EmptyInput)?;
        let first = first?;
        let fields: Vec<&str> = first.split(' ').collect();
        if fields.len() != 2 {
            return Err(VectorStoreError::Parse {
                line: 1,
                reason: format!("expected \"V D\" header, found {:?}", first),
            });
        }
        let v = fields[0]
            .parse::<usize>()
            .map_err(|e| VectorStoreError::Parse {
                line: 1,
                reason: format!("bad vocabulary count: {e}"),
            })?;
        let d = fields[1]
            .parse::<usize>()
            .map_err(|e| VectorStoreError::Parse {
                line: 1,
                reason: format!("bad dimension: {e}"),
            })?;
        declared = Some((v, d));
    }

    let mut store = VectorStore {
        dim: declared.map(|(_, d)| d).unwrap_or(0),
        vocab: Vec::new(),
        matrix: Vec::new(),
        token_index: HashMap::new(),
    };
    let mut report = LoadReport::default();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token =
            fields
                .next()
                .filter(|t| !t.is_empty())
                .ok_or_else(|| VectorStoreError::Parse {
                    line: line_no,
                    reason: "missing token".into(),
                })?;
        let mut values = Vec::with_capacity(store.dim);
        for field in fields {
            let v = field.parse::<f64>().map_err(|e| VectorStoreError::Parse {
                line: line_no,
                reason: format!("bad value {field:?}: {e}"),
            })?;
            values.push(v);
        }
        if values.is_empty() {
            return Err(VectorStoreError::Parse {
                line: line_no,
                reason: "no vector values".into(),
            });
        }
        if store.vocab.is_empty() && store.dim == 0 {
            store.dim = values.len();
        }
        if !store.push_row(token.to_string(), &values, line_no)? {
            report.duplicates.push(token.to_string());
        }
    }

    if store.vocab.is_empty() {
        return Err(VectorStoreError::EmptyInput);
    }
    if let Some((v, _)) = declared {
        if store.vocab.len() + report.duplicates.len() != v {
            return Err(VectorStoreError::Parse {
                line: 1,
                reason: format!(
                    "header declares {v} vectors, file has {}",
                    store.vocab.len() + report.duplicates.len()
                ),
            });
        }
    }
    report.n_tokens = store.vocab.len();
    report.dim = store.dim;
    Ok((store, report))
}

/// Write a store back out. Values print as the shortest decimal that parses
/// back to the same f64, so load → save → load reproduces the matrix
/// bit-exactly.
pub fn save_vectors(
    store: &VectorStore,
    path: &Path,
    format: VectorFormat,
) -> Result<(), VectorStoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    if format == VectorFormat::Word2vecText {
        writeln!(w, "{} {}", store.len(), store.dim())?;
    }
    for (i, token) in store.vocab().iter().enumerate() {
        write!(w, "{token}")?;
        for v in store.row(i) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
