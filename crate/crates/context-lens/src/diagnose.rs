//! Human/machine disagreement mining and the re-annotation audit.
//!
//! Disagreements are exported for blinded re-coding: the CSV shows the two
//! labels under neutral names `label_a` / `label_b`, with a separate sealed
//! mapping file recording which one is the machine's. The adjudicator's
//! verdicts come back as `machine` / `human` / `unclear` and roll up into
//! an agreement summary. A similarity-ratio pass over the disagreement set
//! surfaces the vocabulary that separates machine-hate from
//! machine-non-hate texts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alacarte::{AlcTransform, GroupEmbedding, InstanceEmbedding};
use crate::corpus::tokenize;
use crate::probe::{Prediction, Side, SplitAssignment};
use crate::simratio::{
    candidate_features, rank_discriminant, FeatureRatio, RatioDirection, SimRatioError,
};
use crate::vectorstore::VectorStore;

#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no label for document {0:?}")]
    MissingLabel(String),
    #[error("no text for document {0:?}")]
    MissingText(String),
    #[error("document {0:?} has no split assignment")]
    MissingSplit(String),
    #[error("import row {row}: unknown document id {id:?}")]
    UnknownId { row: usize, id: String },
    #[error("import row {row}: invalid adjudication {value:?} (want machine|human|unclear)")]
    InvalidAdjudication { row: usize, value: String },
    #[error("import file is missing column {0:?}")]
    MissingColumn(&'static str),
    #[error("no adjudicated records to summarize")]
    NoAdjudicated,
    #[error("disagreement set has a single machine-label group; need both")]
    InsufficientGroups,
    #[error(transparent)]
    SimRatio(#[from] SimRatioError),
}

/// The adjudicator's verdict on one disagreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjudication {
    AgreesWithMachine,
    AgreesWithHuman,
    Unclear,
}

/// A document where machine and human labels differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRecord {
    pub doc_id: String,
    pub text: String,
    pub human_label: u8,
    pub machine_label: u8,
    pub machine_probability: f64,
    pub adjudication: Option<Adjudication>,
}

/// Which split side to mine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideFilter {
    Train,
    Test,
    All,
}

impl SideFilter {
    fn accepts(&self, side: Side) -> bool {
        matches!(
            (self, side),
            (SideFilter::All, _)
                | (SideFilter::Train, Side::Train)
                | (SideFilter::Test, Side::Test)
        )
    }
}

/// Exactly the documents where the machine label differs from the human
/// label on the chosen side, in prediction order.
pub fn mine_disagreements(
    predictions: &[Prediction],
    labels: &HashMap<String, u8>,
    texts: &HashMap<String, String>,
    split: &SplitAssignment,
    side: SideFilter,
) -> Result<Vec<DisagreementRecord>, DiagnoseError> {
    let mut records = Vec::new();
    for prediction in predictions {
        let assigned = split
            .side_of(&prediction.id)
            .ok_or_else(|| DiagnoseError::MissingSplit(prediction.id.clone()))?;
        if !side.accepts(assigned) {
            continue;
        }
        let human = labels
            .get(&prediction.id)
            .copied()
            .ok_or_else(|| DiagnoseError::MissingLabel(prediction.id.clone()))?;
        if human == prediction.label {
            continue;
        }
        let text = texts
            .get(&prediction.id)
            .cloned()
            .ok_or_else(|| DiagnoseError::MissingText(prediction.id.clone()))?;
        records.push(DisagreementRecord {
            doc_id: prediction.id.clone(),
            text,
            human_label: human,
            machine_label: prediction.label,
            machine_probability: prediction.probability,
            adjudication: None,
        });
    }
    Ok(records)
}

fn fnv1a64(data: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in data.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// In the blinded export, is the machine's label shown as `label_a`?
/// Derived from the id so exports are reproducible without a seed.
fn machine_is_a(doc_id: &str) -> bool {
    fnv1a64(doc_id).is_multiple_of(2)
}

fn adjudication_str(adjudication: Option<Adjudication>) -> &'static str {
    match adjudication {
        None => "",
        Some(Adjudication::AgreesWithMachine) => "machine",
        Some(Adjudication::AgreesWithHuman) => "human",
        Some(Adjudication::Unclear) => "unclear",
    }
}

/// Write the blinded re-annotation CSV next to its sealed mapping file.
/// The CSV never says which label is the machine's; the mapping JSON
/// (`{doc_id: "a" | "b"}`) records it for the post-audit unsealing.
/// Both writes are atomic (temp file + rename).
pub fn export_reannotation(
    records: &[DisagreementRecord],
    csv_path: &Path,
    mapping_path: &Path,
) -> Result<(), DiagnoseError> {
    let mut csv_bytes = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut csv_bytes);
        writer.write_record(["id", "text", "label_a", "label_b", "adjudication"])?;
        for record in records {
            let (label_a, label_b) = if machine_is_a(&record.doc_id) {
                (record.machine_label, record.human_label)
            } else {
                (record.human_label, record.machine_label)
            };
            writer.write_record([
                record.doc_id.as_str(),
                record.text.as_str(),
                &label_a.to_string(),
                &label_b.to_string(),
                adjudication_str(record.adjudication),
            ])?;
        }
        writer.flush()?;
    }
    write_atomic(csv_path, &csv_bytes)?;

    let mapping: BTreeMap<&str, &str> = records
        .iter()
        .map(|r| {
            (
                r.doc_id.as_str(),
                if machine_is_a(&r.doc_id) { "a" } else { "b" },
            )
        })
        .collect();
    let mut json = serde_json::to_vec_pretty(&mapping)?;
    json.push(b'\n');
    write_atomic(mapping_path, &json)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Join adjudications back onto the records by id. The CSV needs `id` and
/// `adjudication` columns; empty adjudications leave a record untouched.
pub fn import_adjudications(
    records: &[DisagreementRecord],
    csv_path: &Path,
) -> Result<Vec<DisagreementRecord>, DiagnoseError> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or(DiagnoseError::MissingColumn("id"))?;
    let adjudication_col = headers
        .iter()
        .position(|h| h == "adjudication")
        .ok_or(DiagnoseError::MissingColumn("adjudication"))?;

    let by_id: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.doc_id.as_str(), i))
        .collect();
    let mut updated = records.to_vec();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row?;
        let id = row.get(id_col).unwrap_or_default();
        let value = row.get(adjudication_col).unwrap_or_default();
        let target = *by_id.get(id).ok_or_else(|| DiagnoseError::UnknownId {
            row: row_no,
            id: id.to_string(),
        })?;
        let adjudication = match value {
            "" => None,
            "machine" => Some(Adjudication::AgreesWithMachine),
            "human" => Some(Adjudication::AgreesWithHuman),
            "unclear" => Some(Adjudication::Unclear),
            other => {
                return Err(DiagnoseError::InvalidAdjudication {
                    row: row_no,
                    value: other.to_string(),
                })
            }
        };
        if adjudication.is_some() {
            updated[target].adjudication = adjudication;
        }
    }
    Ok(updated)
}

/// Agreement rates over the adjudicated subset. Counts are the source of
/// truth; the rates are count ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub n_disagreements: usize,
    pub n_adjudicated: usize,
    pub n_agrees_machine: usize,
    pub n_agrees_human: usize,
    pub n_unclear: usize,
    pub machine_agreement_rate: f64,
    pub human_agreement_rate: f64,
    pub unclear_rate: f64,
}

pub fn agreement_summary(
    records: &[DisagreementRecord],
) -> Result<AgreementSummary, DiagnoseError> {
    let mut machine = 0usize;
    let mut human = 0usize;
    let mut unclear = 0usize;
    for record in records {
        match record.adjudication {
            Some(Adjudication::AgreesWithMachine) => machine += 1,
            Some(Adjudication::AgreesWithHuman) => human += 1,
            Some(Adjudication::Unclear) => unclear += 1,
            None => {}
        }
    }
    let adjudicated = machine + human + unclear;
    if adjudicated == 0 {
        return Err(DiagnoseError::NoAdjudicated);
    }
    Ok(AgreementSummary {
        n_disagreements: records.len(),
        n_adjudicated: adjudicated,
        n_agrees_machine: machine,
        n_agrees_human: human,
        n_unclear: unclear,
        machine_agreement_rate: machine as f64 / adjudicated as f64,
        human_agreement_rate: human as f64 / adjudicated as f64,
        unclear_rate: unclear as f64 / adjudicated as f64,
    })
}

pub fn write_summary_json(summary: &AgreementSummary, path: &Path) -> Result<(), DiagnoseError> {
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    write_atomic(path, &json)?;
    Ok(())
}

/// Discriminant features over the disagreement set, with the group
/// embeddings they were ranked against. Group A pools the texts the
/// machine called hate (label 1), group B the rest.
#[derive(Debug, Clone)]
pub struct DisagreementFeatures {
    pub rows: Vec<FeatureRatio>,
    pub group_hate: GroupEmbedding,
    pub group_non_hate: GroupEmbedding,
}

/// Embed each disagreement text as the transformed mean of all its
/// in-vocabulary tokens (no focal pattern; these texts are short), pool by
/// machine label, and rank the nearest-feature union by similarity ratio.
pub fn disagreement_features(
    records: &[DisagreementRecord],
    store: &VectorStore,
    transform: &AlcTransform,
    k_per_group: usize,
    direction: RatioDirection,
) -> Result<DisagreementFeatures, DiagnoseError> {
    let mut sums: BTreeMap<u8, (Vec<f64>, usize)> = BTreeMap::new();
    for record in records {
        let tokens = tokenize(&record.text);
        let instance = crate::corpus::ContextInstance {
            doc_id: record.doc_id.clone(),
            match_position: 0,
            context_tokens: tokens,
            covariates: vec![],
        };
        let embedded: InstanceEmbedding =
            match crate::alacarte::alc_embed(&instance, store, transform) {
                Ok(e) => e,
                // Texts with no in-vocabulary tokens contribute nothing.
                Err(crate::alacarte::AlcError::NoContext { .. }) => continue,
                Err(e) => {
                    return Err(DiagnoseError::SimRatio(SimRatioError::Store(
                        crate::vectorstore::VectorStoreError::UnknownToken(e.to_string()),
                    )))
                }
            };
        let entry = sums
            .entry(record.machine_label)
            .or_insert_with(|| (vec![0.0; store.dim()], 0));
        for (acc, v) in entry.0.iter_mut().zip(&embedded.vector) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let (Some(hate), Some(non_hate)) = (sums.remove(&1), sums.remove(&0)) else {
        return Err(DiagnoseError::InsufficientGroups);
    };
    let group_hate = GroupEmbedding {
        label: "machine-hate".into(),
        vector: hate.0.iter().map(|v| v / hate.1 as f64).collect(),
        n_instances: hate.1,
    };
    let group_non_hate = GroupEmbedding {
        label: "machine-non-hate".into(),
        vector: non_hate.0.iter().map(|v| v / non_hate.1 as f64).collect(),
        n_instances: non_hate.1,
    };

    let features = candidate_features(
        &group_hate,
        &group_non_hate,
        store,
        k_per_group,
        &HashSet::new(),
    )?;
    let rows = rank_discriminant(&features, &group_hate, &group_non_hate, store, direction)?;
    Ok(DisagreementFeatures {
        rows,
        group_hate,
        group_non_hate,
    })
}

/// Persist a disagreement set (the CLI's working format between
/// `probe diagnose` and the `reannotate` subcommands).
pub fn save_records(records: &[DisagreementRecord], path: &Path) -> Result<(), DiagnoseError> {
    let mut json = serde_json::to_vec_pretty(records)?;
    json.push(b'\n');
    write_atomic(path, &json)?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<DisagreementRecord>, DiagnoseError> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
