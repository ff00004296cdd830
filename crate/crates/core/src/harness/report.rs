//! Run reports, per-example traces, and the derived CSV tables.
//!
//! Per-example traces are the source of truth: every table (model AUROC,
//! complementarity matrix, confident-correct distribution) is a pure
//! function of them, so tables can be regenerated after the fact without
//! touching any backend. All orderings are lexicographic by backend id to
//! keep regeneration byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::ensemble::{EnsembleSelection, FusionDecision};
use crate::eval::{ModelAnswer, PromptTemplates};
use crate::metrics::{self, ComplementarityMatrix, LabeledScore};
use crate::uncertainty::UncertaintyEvidence;

use super::config::UncertaintyConfig;
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSide {
    Validation,
    Test,
}

/// One line of `traces/<backend_id>.jsonl`. `method` is the configured
/// uncertainty method name so tables regenerate without the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub example_id: String,
    pub split: SplitSide,
    pub answer: String,
    pub correct: bool,
    pub uncertainty: f64,
    pub method: String,
    pub evidence: UncertaintyEvidence,
}

impl TraceRecord {
    pub fn from_answer(answer: &ModelAnswer, split: SplitSide, method: &str) -> Self {
        Self {
            example_id: answer.example_id.clone(),
            split,
            answer: answer.answer.clone(),
            correct: answer.correct,
            uncertainty: answer.uncertainty.value,
            method: method.to_string(),
            evidence: answer.uncertainty.evidence.clone(),
        }
    }

    fn labeled(&self) -> LabeledScore {
        LabeledScore {
            example_id: self.example_id.clone(),
            correct: self.correct,
            uncertainty: self.uncertainty,
        }
    }
}

/// Resolved configuration embedded in `report.json`. Volatile paths
/// (output and cache directories, dataset location) are reduced to the
/// dataset file name plus its content hash so reports stay byte-identical
/// across machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub dataset_file: String,
    pub dataset_sha256: String,
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub uncertainty: UncertaintyConfig,
    pub k: usize,
    pub k_tuned: bool,
    pub criterion: String,
    pub max_tokens: u32,
    pub prompts: PromptTemplates,
    pub pool: Vec<BackendDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub backend_id: String,
    pub accuracy: f64,
    pub sah: f64,
    pub cscore: f64,
    pub n_examples: usize,
    pub degenerate_sah: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub backend_id: String,
    pub method: String,
    /// None when the model's test answers are single-class.
    pub auroc: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Fraction of test examples per bucket: each model counts examples where
/// it is correct with strictly the lowest uncertainty among correct models;
/// equal minima land in `tied`, examples nobody answers correctly in
/// `no_correct_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidentCorrectDistribution {
    pub per_model: BTreeMap<String, f64>,
    pub tied: f64,
    pub no_correct_model: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityReport {
    pub matrix: ComplementarityMatrix,
    pub footnote: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepPoint {
    pub k: usize,
    pub ensemble_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigSnapshot,
    pub n_validation: usize,
    pub n_test: usize,
    pub profiles: Vec<ProfileRow>,
    pub selection: EnsembleSelection,
    pub ensemble_accuracy: f64,
    pub criterion_accuracies: BTreeMap<String, f64>,
    pub auroc_table: Vec<AurocRow>,
    pub complementarity: ComplementarityReport,
    pub confident_correct: ConfidentCorrectDistribution,
    pub notes: Vec<String>,
}

/// Wall-clock and call-count telemetry. Written to `telemetry.json`,
/// never into `report.json`: call counts change between cold and warm
/// runs and timings are never reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTelemetry {
    pub wall_clock_secs: f64,
    pub total_live_calls: u64,
    pub total_cache_hits: u64,
    pub backends: Vec<BackendTelemetry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendTelemetry {
    pub backend_id: String,
    pub live_calls: u64,
    pub cache_hits: u64,
    pub latency_p50_us: u64,
    pub latency_p95_us: u64,
    pub latency_max_us: u64,
}

pub const COMPLEMENTARITY_FOOTNOTE: &str = "detection gain counts examples where both models \
answer incorrectly, the column model's uncertainty exceeds 0.5, and the row model's does not; \
this reading of the shared-miss condition and the 0.5 threshold apply to this table only";

// ---------------------------------------------------------------------------
// Table derivations (pure functions of trace records)
// ---------------------------------------------------------------------------

/// Test-split records per backend, lexicographic by backend id.
pub type TracesByBackend = BTreeMap<String, Vec<TraceRecord>>;

pub fn auroc_table(traces: &TracesByBackend, method: &str) -> Vec<AurocRow> {
    traces
        .iter()
        .map(|(backend_id, records)| {
            let labeled: Vec<LabeledScore> = records.iter().map(|r| r.labeled()).collect();
            let n_incorrect = labeled.iter().filter(|l| !l.correct).count();
            let n_correct = labeled.len() - n_incorrect;
            AurocRow {
                backend_id: backend_id.clone(),
                method: method.to_string(),
                auroc: metrics::auroc(&labeled).ok(),
                n_correct,
                n_incorrect,
            }
        })
        .collect()
}

pub fn complementarity_report(
    traces: &TracesByBackend,
) -> Result<ComplementarityReport, HarnessError> {
    let per_model: Vec<(String, Vec<LabeledScore>)> = traces
        .iter()
        .map(|(id, records)| (id.clone(), records.iter().map(|r| r.labeled()).collect()))
        .collect();
    let matrix = metrics::complementarity_matrix(&per_model).map_err(|e| match e {
        metrics::MetricsError::MismatchedExamples { missing } => {
            HarnessError::MissingTraces { missing }
        }
        other => other.into(),
    })?;
    Ok(ComplementarityReport {
        matrix,
        footnote: COMPLEMENTARITY_FOOTNOTE.to_string(),
    })
}

pub fn confident_correct_distribution(
    traces: &TracesByBackend,
) -> Result<ConfidentCorrectDistribution, HarnessError> {
    let ids: Vec<&String> = traces.keys().collect();
    let by_example = align_by_example(traces)?;
    let n = by_example.len();
    if n == 0 {
        return Err(HarnessError::Config {
            path: None,
            message: "no test trace records to aggregate".into(),
        });
    }
    let mut wins: BTreeMap<String, usize> = ids.iter().map(|id| ((*id).clone(), 0)).collect();
    let mut tied = 0usize;
    let mut no_correct = 0usize;
    for records in by_example.values() {
        let correct: Vec<(&String, f64)> = ids
            .iter()
            .zip(records)
            .filter(|(_, r)| r.correct)
            .map(|(id, r)| (*id, r.uncertainty))
            .collect();
        if correct.is_empty() {
            no_correct += 1;
            continue;
        }
        let min_u = correct
            .iter()
            .map(|(_, u)| *u)
            .fold(f64::INFINITY, f64::min);
        let winners: Vec<&String> = correct
            .iter()
            .filter(|(_, u)| *u == min_u)
            .map(|(id, _)| *id)
            .collect();
        if winners.len() == 1 {
            *wins.get_mut(winners[0]).expect("winner is a known backend") += 1;
        } else {
            tied += 1;
        }
    }
    Ok(ConfidentCorrectDistribution {
        per_model: wins
            .into_iter()
            .map(|(id, count)| (id, count as f64 / n as f64))
            .collect(),
        tied: tied as f64 / n as f64,
        no_correct_model: no_correct as f64 / n as f64,
        n_examples: n,
    })
}

/// Group records by example id, requiring every backend to cover every
/// example; the inner vector follows the backend key order of `traces`.
fn align_by_example(
    traces: &TracesByBackend,
) -> Result<BTreeMap<String, Vec<&TraceRecord>>, HarnessError> {
    let mut all_ids: BTreeSet<&str> = BTreeSet::new();
    for records in traces.values() {
        all_ids.extend(records.iter().map(|r| r.example_id.as_str()));
    }
    let mut missing = Vec::new();
    let mut by_example: BTreeMap<String, Vec<&TraceRecord>> = BTreeMap::new();
    for (backend_id, records) in traces {
        let map: BTreeMap<&str, &TraceRecord> =
            records.iter().map(|r| (r.example_id.as_str(), r)).collect();
        for id in &all_ids {
            match map.get(id) {
                Some(record) => by_example.entry(id.to_string()).or_default().push(record),
                None => missing.push((backend_id.clone(), id.to_string())),
            }
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingTraces { missing });
    }
    Ok(by_example)
}

// ---------------------------------------------------------------------------
// Artifact IO
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_traces(
    dir: &Path,
    backend_id: &str,
    validation: &[ModelAnswer],
    test: &[ModelAnswer],
    method: &str,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("{backend_id}.jsonl"));
    let mut file = std::fs::File::create(&path).map_err(io_err(&path))?;
    for (answers, side) in [(validation, SplitSide::Validation), (test, SplitSide::Test)] {
        for answer in answers {
            let record = TraceRecord::from_answer(answer, side, method);
            let line = serde_json::to_string(&record).expect("trace serializes");
            writeln!(file, "{line}").map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Read all trace files under `dir`, keyed by backend id (the file stem).
pub fn read_traces(dir: &Path) -> Result<BTreeMap<String, Vec<TraceRecord>>, HarnessError> {
    let mut traces = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        let backend_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let file = std::fs::File::open(&path).map_err(io_err(&path))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceRecord =
                serde_json::from_str(&line).map_err(|e| HarnessError::Config {
                    path: Some(path.clone()),
                    message: format!("corrupt trace line {}: {e}", idx + 1),
                })?;
            records.push(record);
        }
        traces.insert(backend_id, records);
    }
    Ok(traces)
}

pub fn test_side(traces: &BTreeMap<String, Vec<TraceRecord>>) -> TracesByBackend {
    traces
        .iter()
        .map(|(id, records)| {
            (
                id.clone(),
                records
                    .iter()
                    .filter(|r| r.split == SplitSide::Test)
                    .cloned()
                    .collect(),
            )
        })
        .collect()
}

pub fn write_decisions(path: &Path, decisions: &[FusionDecision]) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    for decision in decisions {
        let line = serde_json::to_string(decision).expect("decision serializes");
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV tables
// ---------------------------------------------------------------------------

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new().from_writer(file))
}

fn finish(mut writer: csv::Writer<std::fs::File>, path: &Path) -> Result<(), HarnessError> {
    writer.flush().map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_profiles_csv(path: &Path, rows: &[ProfileRow]) -> Result<(), HarnessError> {
    let mut writer = csv_writer(path)?;
    let record_err = |e: csv::Error| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    };
    writer
        .write_record([
            "backend_id",
            "accuracy",
            "sah",
            "cscore",
            "n_examples",
            "degenerate_sah",
            "selected",
        ])
        .map_err(record_err)?;
    for row in rows {
        writer
            .write_record([
                row.backend_id.as_str(),
                &row.accuracy.to_string(),
                &row.sah.to_string(),
                &row.cscore.to_string(),
                &row.n_examples.to_string(),
                &row.degenerate_sah.to_string(),
                &row.selected.to_string(),
            ])
            .map_err(record_err)?;
    }
    finish(writer, path)
}

pub fn write_auroc_csv(path: &Path, rows: &[AurocRow]) -> Result<(), HarnessError> {
    let mut writer = csv_writer(path)?;
    let record_err = |e: csv::Error| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    };
    writer
        .write_record(["backend_id", "method", "auroc", "n_correct", "n_incorrect"])
        .map_err(record_err)?;
    for row in rows {
        let auroc = row.auroc.map(|v| v.to_string()).unwrap_or_default();
        writer
            .write_record([
                row.backend_id.as_str(),
                row.method.as_str(),
                &auroc,
                &row.n_correct.to_string(),
                &row.n_incorrect.to_string(),
            ])
            .map_err(record_err)?;
    }
    finish(writer, path)
}

pub fn write_complementarity_csv(
    path: &Path,
    report: &ComplementarityReport,
) -> Result<(), HarnessError> {
    let mut writer = csv_writer(path)?;
    let record_err = |e: csv::Error| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    };
    writer
        .write_record([
            "row_model",
            "col_model",
            "accuracy_gain_pct",
            "detection_gain_pct",
        ])
        .map_err(record_err)?;
    let ids = &report.matrix.backend_ids;
    for (i, row) in report.matrix.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if let Some(cell) = cell {
                writer
                    .write_record([
                        ids[i].as_str(),
                        ids[j].as_str(),
                        &cell.accuracy_gain_pct.to_string(),
                        &cell.detection_gain_pct.to_string(),
                    ])
                    .map_err(record_err)?;
            }
        }
    }
    finish(writer, path)
}

pub fn write_fig1_csv(
    path: &Path,
    distribution: &ConfidentCorrectDistribution,
) -> Result<(), HarnessError> {
    let mut writer = csv_writer(path)?;
    let record_err = |e: csv::Error| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    };
    writer
        .write_record(["bucket", "kind", "fraction"])
        .map_err(record_err)?;
    for (id, fraction) in &distribution.per_model {
        writer
            .write_record([id.as_str(), "model", &fraction.to_string()])
            .map_err(record_err)?;
    }
    writer
        .write_record(["tied", "tied", &distribution.tied.to_string()])
        .map_err(record_err)?;
    writer
        .write_record([
            "no_correct_model",
            "no_correct_model",
            &distribution.no_correct_model.to_string(),
        ])
        .map_err(record_err)?;
    finish(writer, path)
}

pub fn write_k_sweep_csv(path: &Path, points: &[KSweepPoint]) -> Result<(), HarnessError> {
    let mut writer = csv_writer(path)?;
    let record_err = |e: csv::Error| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: e.to_string(),
    };
    writer
        .write_record(["k", "ensemble_accuracy"])
        .map_err(record_err)?;
    for point in points {
        writer
            .write_record([point.k.to_string(), point.ensemble_accuracy.to_string()])
            .map_err(record_err)?;
    }
    finish(writer, path)
}

/// Output file names within a run directory.
pub mod files {
    pub const REPORT: &str = "report.json";
    pub const TELEMETRY: &str = "telemetry.json";
    pub const PROFILES: &str = "profiles.csv";
    pub const AUROC: &str = "auroc_table.csv";
    pub const COMPLEMENTARITY: &str = "complementarity.csv";
    pub const FIG1: &str = "fig1_distribution.csv";
    pub const K_SWEEP: &str = "k_sweep.csv";
    pub const DECISIONS: &str = "decisions.jsonl";
    pub const TRACES_DIR: &str = "traces";
    pub const ERROR: &str = "error.json";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Rq1,
    Rq2,
    Fig1,
}

impl std::str::FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rq1" => Ok(ReportKind::Rq1),
            "rq2" => Ok(ReportKind::Rq2),
            "fig1" => Ok(ReportKind::Fig1),
            other => Err(format!(
                "unknown report kind {other:?}; expected rq1, rq2, or fig1"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PercentileSummary {
    pub p50: u64,
    pub p95: u64,
    pub max: u64,
}

pub fn latency_percentiles(mut latencies_us: Vec<u64>) -> PercentileSummary {
    if latencies_us.is_empty() {
        return PercentileSummary {
            p50: 0,
            p95: 0,
            max: 0,
        };
    }
    latencies_us.sort_unstable();
    let at = |pct: usize| latencies_us[(latencies_us.len() - 1) * pct / 100];
    PercentileSummary {
        p50: at(50),
        p95: at(95),
        max: *latencies_us.last().expect("non-empty"),
    }
}
