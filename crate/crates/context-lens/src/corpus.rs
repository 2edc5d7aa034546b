//! Corpus ingestion, tokenization, covariate resolution, and context-window
//! extraction around a focal pattern.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {record}: {reason}")]
    BadRecord { record: usize, reason: String },
    #[error("record {record}: missing field {field:?}")]
    MissingField { record: usize, field: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("covariate spec {spec:?}: field {field:?} missing on document {doc_id:?}")]
    CovariateFieldMissing {
        spec: String,
        field: String,
        doc_id: String,
    },
    #[error(
        "covariate spec {spec:?}: value {value:?} on document {doc_id:?} is not usable ({reason})"
    )]
    CovariateValue {
        spec: String,
        value: String,
        doc_id: String,
        reason: String,
    },
    #[error("focal pattern is empty")]
    EmptyPattern,
}

/// A scalar metadata value carried on a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaValue::Bool(b) => write!(f, "{b}"),
            MetaValue::Number(n) => write!(f, "{n}"),
            MetaValue::Text(s) => write!(f, "{s}"),
        }
    }
}

/// One annotated comment. `meta` holds every field other than id and text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub meta: BTreeMap<String, MetaValue>,
}

/// A per-document binary indicator resolved from document metadata.
/// `values[i]` belongs to the i-th document of the corpus it was resolved on.
#[derive(Debug, Clone)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<u8>,
}

/// The focal term: one or more token sequences pooled together, e.g.
/// `woman` and `women`, or the two-token sequence `ching chong`.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalPattern {
    variants: Vec<Vec<String>>,
}

impl FocalPattern {
    /// Build from raw variant strings; each is tokenized, so patterns match
    /// the same surface forms the extractor sees. Multi-token variants are
    /// tried before shorter ones at each position.
    pub fn new<S: AsRef<str>>(variants: &[S]) -> Result<Self, CorpusError> {
        let mut parsed: Vec<Vec<String>> = Vec::new();
        for raw in variants {
            let tokens = tokenize(raw.as_ref());
            if !tokens.is_empty() {
                parsed.push(tokens);
            }
        }
        if parsed.is_empty() {
            return Err(CorpusError::EmptyPattern);
        }
        parsed.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        parsed.dedup();
        Ok(FocalPattern { variants: parsed })
    }

    /// Comma-separated form used on the command line: `"woman,women"`.
    pub fn parse(spec: &str) -> Result<Self, CorpusError> {
        let variants: Vec<&str> = spec.split(',').collect();
        Self::new(&variants)
    }

    /// Variants, longest first.
    pub fn variants(&self) -> &[Vec<String>] {
        &self.variants
    }

    /// Every token that appears in any variant. Used to exclude focal
    /// tokens from feature candidates.
    pub fn all_tokens(&self) -> HashSet<String> {
        self.variants.iter().flatten().cloned().collect()
    }
}

/// One occurrence of the focal pattern with its surrounding window.
#[derive(Debug, Clone)]
pub struct ContextInstance {
    pub doc_id: String,
    /// Token offset of the first matched token within the document.
    pub match_position: usize,
    /// Up to `window` tokens before plus `window` after the match; never
    /// includes the matched tokens themselves.
    pub context_tokens: Vec<String>,
    /// Resolved covariate values, aligned with the covariate list passed
    /// to the extractor.
    pub covariates: Vec<u8>,
}

/// Corpus file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One JSON object per line.
    Jsonl,
    /// RFC-style CSV with a header row.
    Csv,
}

/// Load a corpus. `id_field` and `text_field` name the two required
/// columns; everything else lands in `meta`. Document order follows file
/// order; a repeated id is a hard error.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    id_field: &str,
    text_field: &str,
) -> Result<Vec<Document>, CorpusError> {
    let docs = match format {
        CorpusFormat::Jsonl => load_jsonl(path, id_field, text_field)?,
        CorpusFormat::Csv => load_csv(path, id_field, text_field)?,
    };
    let mut seen = HashSet::new();
    for doc in &docs {
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id.clone()));
        }
    }
    Ok(docs)
}

fn load_jsonl(path: &Path, id_field: &str, text_field: &str) -> Result<Vec<Document>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let record = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
                record,
                reason: format!("invalid JSON: {e}"),
            })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::BadRecord {
            record,
            reason: "line is not a JSON object".into(),
        })?;
        let id =
            json_scalar_string(obj.get(id_field)).ok_or_else(|| CorpusError::MissingField {
                record,
                field: id_field.to_string(),
            })?;
        let text =
            json_scalar_string(obj.get(text_field)).ok_or_else(|| CorpusError::MissingField {
                record,
                field: text_field.to_string(),
            })?;
        let mut meta = BTreeMap::new();
        for (key, val) in obj {
            if key == id_field || key == text_field {
                continue;
            }
            let scalar = match val {
                serde_json::Value::Bool(b) => MetaValue::Bool(*b),
                serde_json::Value::Number(n) => {
                    MetaValue::Number(n.as_f64().ok_or_else(|| CorpusError::BadRecord {
                        record,
                        reason: format!("field {key:?} is not a finite number"),
                    })?)
                }
                serde_json::Value::String(s) => MetaValue::Text(s.clone()),
                serde_json::Value::Null => continue,
                other => {
                    return Err(CorpusError::BadRecord {
                        record,
                        reason: format!("field {key:?} is not a scalar: {other}"),
                    })
                }
            };
            meta.insert(key.clone(), scalar);
        }
        docs.push(Document { id, text, meta });
    }
    Ok(docs)
}

fn json_scalar_string(value: Option<&serde_json::Value>) -> Option<String> {
    match value? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn load_csv(path: &Path, id_field: &str, text_field: &str) -> Result<Vec<Document>, CorpusError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut docs = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let record = idx + 1;
        let row = row?;
        let mut id = None;
        let mut text = None;
        let mut meta = BTreeMap::new();
        for (header, value) in headers.iter().zip(row.iter()) {
            if header == id_field {
                id = Some(value.to_string());
            } else if header == text_field {
                text = Some(value.to_string());
            } else {
                meta.insert(header.to_string(), MetaValue::Text(value.to_string()));
            }
        }
        let id = id.ok_or_else(|| CorpusError::MissingField {
            record,
            field: id_field.to_string(),
        })?;
        let text = text.ok_or_else(|| CorpusError::MissingField {
            record,
            field: text_field.to_string(),
        })?;
        docs.push(Document { id, text, meta });
    }
    Ok(docs)
}

/// Lowercase tokens split on Unicode whitespace, with leading and trailing
/// non-alphanumeric characters stripped. Interior characters (apostrophes,
/// hyphens) survive, so `don't` stays one token.
pub fn tokenize(text: &str) -> Vec<String> {
    // Lowercase before trimming: some uppercase characters lower to a base
    // letter plus combining marks, and the marks must be trimmable too.
    text.split_whitespace()
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_string())
            }
        })
        .collect()
}

/// How a covariate spec string is interpreted.
///
/// - `field` — the metadata value itself must be binary (bool, 0/1, or a
///   true/false string).
/// - `field=value` — string equality against the value's display form.
/// - `field>threshold` — numeric strictly-greater test; string values are
///   parsed as numbers, anything unparseable is an error.
pub fn resolve_covariate(docs: &[Document], spec: &str) -> Result<Covariate, CorpusError> {
    enum Rule<'a> {
        Binary,
        Equals(&'a str),
        Greater(f64),
    }
    let (field, rule) = if let Some((field, value)) = spec.split_once('=') {
        (field, Rule::Equals(value))
    } else if let Some((field, threshold)) = spec.split_once('>') {
        let threshold = threshold
            .parse::<f64>()
            .map_err(|e| CorpusError::CovariateValue {
                spec: spec.to_string(),
                value: threshold.to_string(),
                doc_id: String::new(),
                reason: format!("threshold is not numeric: {e}"),
            })?;
        (field, Rule::Greater(threshold))
    } else {
        (spec, Rule::Binary)
    };

    let mut values = Vec::with_capacity(docs.len());
    for doc in docs {
        let raw = doc
            .meta
            .get(field)
            .ok_or_else(|| CorpusError::CovariateFieldMissing {
                spec: spec.to_string(),
                field: field.to_string(),
                doc_id: doc.id.clone(),
            })?;
        let bit = match &rule {
            Rule::Binary => binary_value(raw).ok_or_else(|| CorpusError::CovariateValue {
                spec: spec.to_string(),
                value: raw.to_string(),
                doc_id: doc.id.clone(),
                reason: "not a binary indicator".into(),
            })?,
            Rule::Equals(expected) => u8::from(raw.to_string() == *expected),
            Rule::Greater(threshold) => {
                let number = match raw {
                    MetaValue::Number(n) => *n,
                    MetaValue::Text(s) => {
                        s.parse::<f64>().map_err(|_| CorpusError::CovariateValue {
                            spec: spec.to_string(),
                            value: s.clone(),
                            doc_id: doc.id.clone(),
                            reason: "not numeric".into(),
                        })?
                    }
                    MetaValue::Bool(_) => {
                        return Err(CorpusError::CovariateValue {
                            spec: spec.to_string(),
                            value: raw.to_string(),
                            doc_id: doc.id.clone(),
                            reason: "boolean cannot be compared with >".into(),
                        })
                    }
                };
                u8::from(number > *threshold)
            }
        };
        values.push(bit);
    }
    Ok(Covariate {
        name: spec.to_string(),
        values,
    })
}

fn binary_value(value: &MetaValue) -> Option<u8> {
    match value {
        MetaValue::Bool(b) => Some(u8::from(*b)),
        MetaValue::Number(n) if *n == 0.0 => Some(0),
        MetaValue::Number(n) if *n == 1.0 => Some(1),
        MetaValue::Text(s) => match s.to_ascii_lowercase().as_str() {
            "true" | "1" => Some(1),
            "false" | "0" => Some(0),
            _ => None,
        },
        _ => None,
    }
}

/// Extract one [`ContextInstance`] per non-overlapping, left-to-right match
/// of the pattern. At each position the longest variant wins. `covariates`
/// must be aligned with `docs` (one value per document each).
pub fn extract_contexts(
    docs: &[Document],
    pattern: &FocalPattern,
    window: usize,
    covariates: &[Covariate],
) -> Vec<ContextInstance> {
    assert!(window >= 1, "window must be at least 1");
    let mut instances = Vec::new();
    for (doc_idx, doc) in docs.iter().enumerate() {
        let tokens = tokenize(&doc.text);
        let covariate_values: Vec<u8> = covariates.iter().map(|c| c.values[doc_idx]).collect();
        let mut pos = 0;
        while pos < tokens.len() {
            let matched_len = pattern
                .variants()
                .iter()
                .find(|variant| tokens[pos..].starts_with(variant))
                .map(|variant| variant.len());
            match matched_len {
                Some(len) => {
                    let before = &tokens[pos.saturating_sub(window)..pos];
                    let after_end = (pos + len + window).min(tokens.len());
                    let after = &tokens[pos + len..after_end];
                    instances.push(ContextInstance {
                        doc_id: doc.id.clone(),
                        match_position: pos,
                        context_tokens: before.iter().chain(after).cloned().collect(),
                        covariates: covariate_values.clone(),
                    });
                    pos += len;
                }
                None => pos += 1,
            }
        }
    }
    instances
}
