//! QA dataset ingest, seeded validation/test split, and answer scoring.
//!
//! Datasets are JSON-lines files, one object per line:
//! `{"id", "question", "kind": "mc"|"gen", "options"?, "gold_index"?, "gold_aliases"?}`.
//! Multiple-choice records carry `options` + `gold_index`; generative records
//! carry a non-empty `gold_aliases` set.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::stable_u64;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: record {id:?}: invalid {field}: {message}")]
    Invalid {
        line: usize,
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("validation fraction must lie in (0, 1), got {fraction}")]
    FractionOutOfRange { fraction: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("answer {answer:?} is not among the options of example {id:?}")]
    AnswerNotAnOption { id: String, answer: String },
}

/// Whether an example is answered by choosing among fixed options or by
/// generating free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    Generative,
}

/// Gold answer material, shaped by the task kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    MultipleChoice {
        options: Vec<String>,
        gold_index: usize,
    },
    Generative {
        gold_aliases: Vec<String>,
    },
}

/// One question with its gold answer(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub task: TaskSpec,
}

impl QaExample {
    pub fn kind(&self) -> TaskKind {
        match self.task {
            TaskSpec::MultipleChoice { .. } => TaskKind::MultipleChoice,
            TaskSpec::Generative { .. } => TaskKind::Generative,
        }
    }

    /// Gold answer as text: the gold option for multiple choice, the first
    /// alias for generative.
    pub fn gold_text(&self) -> &str {
        match &self.task {
            TaskSpec::MultipleChoice {
                options,
                gold_index,
            } => &options[*gold_index],
            TaskSpec::Generative { gold_aliases } => &gold_aliases[0],
        }
    }
}

/// Seeded validation/test partition of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub validation: Vec<QaExample>,
    pub test: Vec<QaExample>,
    pub split_seed: u64,
    pub validation_fraction: f64,
}

/// On-disk record shape. Kept separate from [`QaExample`] so parsing errors
/// can name the offending line and field.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_aliases: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    JsonLines,
}

fn validate_record(record: RawRecord, line: usize) -> Result<QaExample, DatasetError> {
    let invalid = |id: &str, field: &'static str, message: String| DatasetError::Invalid {
        line,
        id: id.to_string(),
        field,
        message,
    };
    if record.id.is_empty() {
        return Err(invalid("", "id", "id must be non-empty".into()));
    }
    let task = match record.kind.as_str() {
        "mc" => {
            let options = record.options.ok_or_else(|| {
                invalid(&record.id, "options", "mc records require options".into())
            })?;
            if options.len() < 2 {
                return Err(invalid(
                    &record.id,
                    "options",
                    format!("need at least 2 options, got {}", options.len()),
                ));
            }
            let gold_index = record.gold_index.ok_or_else(|| {
                invalid(
                    &record.id,
                    "gold_index",
                    "mc records require gold_index".into(),
                )
            })?;
            if gold_index >= options.len() {
                return Err(invalid(
                    &record.id,
                    "gold_index",
                    format!(
                        "gold_index {gold_index} out of range for {} options (valid 0..={})",
                        options.len(),
                        options.len() - 1
                    ),
                ));
            }
            if record.gold_aliases.is_some() {
                return Err(invalid(
                    &record.id,
                    "gold_aliases",
                    "mc records must not carry gold_aliases".into(),
                ));
            }
            TaskSpec::MultipleChoice {
                options,
                gold_index,
            }
        }
        "gen" => {
            let gold_aliases = record.gold_aliases.ok_or_else(|| {
                invalid(
                    &record.id,
                    "gold_aliases",
                    "gen records require gold_aliases".into(),
                )
            })?;
            if gold_aliases.is_empty() {
                return Err(invalid(
                    &record.id,
                    "gold_aliases",
                    "gold_aliases must be non-empty".into(),
                ));
            }
            if record.options.is_some() {
                return Err(invalid(
                    &record.id,
                    "options",
                    "gen records must not carry options".into(),
                ));
            }
            TaskSpec::Generative { gold_aliases }
        }
        other => {
            return Err(invalid(
                &record.id,
                "kind",
                format!("unknown kind {other:?}, expected \"mc\" or \"gen\""),
            ))
        }
    };
    Ok(QaExample {
        id: record.id,
        question: record.question,
        task,
    })
}

/// Load and validate a JSON-lines dataset, preserving file order.
pub fn load_dataset(path: &Path) -> Result<Vec<QaExample>, DatasetError> {
    load_dataset_with_format(path, None)
}

pub fn load_dataset_with_format(
    path: &Path,
    _format_hint: Option<DatasetFormat>,
) -> Result<Vec<QaExample>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let example = validate_record(raw, line_no)?;
        if !seen.insert(example.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: example.id,
                line: line_no,
            });
        }
        examples.push(example);
    }
    Ok(examples)
}

/// Write a dataset in the JSON-lines format `load_dataset` reads.
pub fn save_dataset(path: &Path, examples: &[QaExample]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = File::create(path).map_err(io_err)?;
    for example in examples {
        let record = match &example.task {
            TaskSpec::MultipleChoice {
                options,
                gold_index,
            } => RawRecord {
                id: example.id.clone(),
                question: example.question.clone(),
                kind: "mc".into(),
                options: Some(options.clone()),
                gold_index: Some(*gold_index),
                gold_aliases: None,
            },
            TaskSpec::Generative { gold_aliases } => RawRecord {
                id: example.id.clone(),
                question: example.question.clone(),
                kind: "gen".into(),
                options: None,
                gold_index: None,
                gold_aliases: Some(gold_aliases.clone()),
            },
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Validation size: round-half-up of `fraction * n`, at least 1.
fn validation_size(n: usize, fraction: f64) -> usize {
    let raw = (fraction * n as f64 + 0.5).floor() as usize;
    raw.clamp(1, n)
}

/// Sample a validation set of `round(fraction * n)` examples without
/// replacement; the remainder is the test set. Deterministic in
/// (dataset order, fraction, seed); both sides keep file order.
pub fn split(
    dataset: &[QaExample],
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::FractionOutOfRange { fraction });
    }
    if dataset.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let n = dataset.len();
    let n_val = validation_size(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| {
        (
            stable_u64(&[b"split", &seed.to_be_bytes(), &(i as u64).to_be_bytes()]),
            i,
        )
    });
    let mut val_idx: Vec<usize> = order[..n_val].to_vec();
    val_idx.sort_unstable();
    let in_val: HashSet<usize> = val_idx.iter().copied().collect();
    let validation = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let test = dataset
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_val.contains(i))
        .map(|(_, ex)| ex.clone())
        .collect();
    Ok(DatasetSplit {
        validation,
        test,
        split_seed: seed,
        validation_fraction: fraction,
    })
}

/// Exact-match normalization: case-fold, strip outer whitespace, strip
/// trailing periods. Stripping runs to a fixed point so the function is
/// idempotent.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .trim_start()
        .trim_end_matches(|c: char| c == '.' || c.is_whitespace())
        .to_string()
}

/// Score one answer against an example's gold material.
///
/// Multiple choice compares option text exactly (the fuser only ever emits
/// option texts; anything else is a harness bug, reported as an error).
/// Generative compares normalized text against every normalized gold alias.
pub fn score_correctness(example: &QaExample, answer_text: &str) -> Result<bool, DatasetError> {
    match &example.task {
        TaskSpec::MultipleChoice {
            options,
            gold_index,
        } => {
            if !options.iter().any(|o| o == answer_text) {
                return Err(DatasetError::AnswerNotAnOption {
                    id: example.id.clone(),
                    answer: answer_text.to_string(),
                });
            }
            Ok(answer_text == options[*gold_index])
        }
        TaskSpec::Generative { gold_aliases } => {
            let normalized = normalize_answer(answer_text);
            Ok(gold_aliases
                .iter()
                .any(|alias| normalize_answer(alias) == normalized))
        }
    }
}
