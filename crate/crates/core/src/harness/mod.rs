//! Experiment orchestration: ingest, split, profile, select, fuse,
//! evaluate, report.
//!
//! `cmd_run`, `cmd_sweep_k`, `cmd_report`, and `cmd_validate` back the CLI
//! subcommands one to one. Runs against simulated pools are deterministic:
//! the same dataset bytes, config, and seeds reproduce `report.json`
//! byte-for-byte (telemetry is kept out of the report for that reason).

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::backend::{build_backend, AnswerKey, BackendError, CachingBackend, ResponseCache};
use crate::dataset::{self, DatasetError, DatasetSplit};
use crate::ensemble::{self, EnsembleError, FusionOutcome, PoolEvaluation};
use crate::eval::{EntailmentJudge, Evaluator, UncertaintySettings};
use crate::hashing::hex_digest;
use crate::metrics::MetricsError;
use crate::uncertainty::{
    AnswerJudge, EquivalenceJudgeConfig, EstimatorRegistry, NormalizedExactJudge,
    TokenJaccardJudge, UncertaintyError,
};

pub use config::{
    load_experiment_config, load_pool_config, ExperimentConfig, PoolConfig, UncertaintyConfig,
};
pub use report::{
    files, AurocRow, ConfidentCorrectDistribution, ConfigSnapshot, KSweepPoint, ProfileRow,
    ReportKind, RunReport, RunTelemetry, TraceRecord,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error{}: {message}", path_suffix(.path))]
    Config {
        path: Option<PathBuf>,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("traces incomplete; missing (backend, example) pairs: {missing:?}")]
    MissingTraces { missing: Vec<(String, String)> },
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" in {}", p.display()),
        None => String::new(),
    }
}

impl HarnessError {
    /// Stable kind tag for the CLI's structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config { .. } => "config",
            HarnessError::Io { .. } => "io",
            HarnessError::Dataset(_) => "dataset",
            HarnessError::Backend(_) => "backend",
            HarnessError::Ensemble(_) => "ensemble",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Uncertainty(_) => "uncertainty",
            HarnessError::MissingTraces { .. } => "missing_traces",
        }
    }
}

/// Judge implementations resolved from config at run time.
enum RuntimeJudge<'a> {
    Exact(NormalizedExactJudge),
    Jaccard(TokenJaccardJudge),
    Entailment(EntailmentJudge<'a>),
}

impl AnswerJudge for RuntimeJudge<'_> {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool, UncertaintyError> {
        match self {
            RuntimeJudge::Exact(j) => j.equivalent(a, b),
            RuntimeJudge::Jaccard(j) => j.equivalent(a, b),
            RuntimeJudge::Entailment(j) => j.equivalent(a, b),
        }
    }
}

fn build_judge<'a>(
    config: &EquivalenceJudgeConfig,
    backends: &'a [CachingBackend],
) -> Result<RuntimeJudge<'a>, HarnessError> {
    match config {
        EquivalenceJudgeConfig::NormalizedExact => Ok(RuntimeJudge::Exact(NormalizedExactJudge)),
        EquivalenceJudgeConfig::TokenJaccard { threshold } => {
            Ok(RuntimeJudge::Jaccard(TokenJaccardJudge::new(*threshold)?))
        }
        EquivalenceJudgeConfig::BackendEntailment { judge_backend } => {
            let backend = backends
                .iter()
                .find(|b| crate::backend::ModelBackend::backend_id(*b) == judge_backend.as_str())
                .ok_or_else(|| HarnessError::Config {
                    path: None,
                    message: format!("judge backend {judge_backend:?} is not in the pool"),
                })?;
            Ok(RuntimeJudge::Entailment(EntailmentJudge::new(backend, 8)))
        }
    }
}

fn method_is_known(method: &str, registry: &EstimatorRegistry) -> bool {
    method == "perplexity" || method == "semantic_entropy" || registry.contains(method)
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub telemetry: RunTelemetry,
    pub output_dir: PathBuf,
}

/// Everything loaded and wired for one experiment.
struct RunContext {
    pool: PoolConfig,
    dataset_sha256: String,
    split: DatasetSplit,
    backends: Vec<CachingBackend>,
}

fn prepare(
    config: &ExperimentConfig,
    registry: &EstimatorRegistry,
) -> Result<RunContext, HarnessError> {
    let pool = config.validate()?;
    if !method_is_known(&config.uncertainty.method, registry) {
        return Err(HarnessError::Config {
            path: None,
            message: format!(
                "unknown uncertainty method {:?}; expected perplexity, semantic_entropy, or a registered estimator",
                config.uncertainty.method
            ),
        });
    }
    let dataset_bytes = std::fs::read(&config.dataset).map_err(|source| HarnessError::Io {
        path: config.dataset.display().to_string(),
        source,
    })?;
    let dataset_sha256 = hex_digest(&[&dataset_bytes]);
    let dataset = dataset::load_dataset(&config.dataset)?;
    let split = dataset::split(&dataset, config.validation_fraction, config.split_seed)?;
    let cache = match &config.cache_dir {
        Some(dir) => Some(Arc::new(ResponseCache::open(dir)?)),
        None => None,
    };
    let answer_key = Arc::new(AnswerKey::new(&dataset));
    let backends = pool
        .backends
        .iter()
        .map(|descriptor| {
            build_backend(descriptor, Some(answer_key.clone()))
                .map(|inner| CachingBackend::new(inner, cache.clone()))
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    Ok(RunContext {
        pool,
        dataset_sha256,
        split,
        backends,
    })
}

fn uncertainty_settings(config: &ExperimentConfig) -> UncertaintySettings {
    UncertaintySettings {
        method: config.uncertainty.method.clone(),
        samples: config.uncertainty.samples,
        sample_temperature: config.uncertainty.sample_temperature,
    }
}

/// Pick K by highest validation fusion accuracy, smaller K on ties.
fn tune_k(
    evaluation: &PoolEvaluation,
    split: &DatasetSplit,
    config: &ExperimentConfig,
    judge: &dyn AnswerJudge,
) -> Result<usize, HarnessError> {
    let n = evaluation.profiles.len();
    let mut best = (1usize, f64::NEG_INFINITY);
    for k in 1..=n {
        let selection = ensemble::select_top_k(&evaluation.profiles, k)?;
        let (_, accuracy) = ensemble::fuse_examples(
            &selection,
            &evaluation.validation_answers,
            &split.validation,
            config.criterion,
            judge,
        )?;
        if accuracy > best.1 {
            best = (k, accuracy);
        }
    }
    Ok(best.0)
}

fn collect_telemetry(backends: &[CachingBackend], started: Instant) -> RunTelemetry {
    let mut total_live = 0u64;
    let mut total_hits = 0u64;
    let mut rows = Vec::with_capacity(backends.len());
    for backend in backends {
        let stats = backend.stats();
        let live = stats.live();
        let hits = stats.hits();
        total_live += live;
        total_hits += hits;
        let summary = report::latency_percentiles(stats.latencies_us());
        rows.push(report::BackendTelemetry {
            backend_id: crate::backend::ModelBackend::backend_id(backend).to_string(),
            live_calls: live,
            cache_hits: hits,
            latency_p50_us: summary.p50,
            latency_p95_us: summary.p95,
            latency_max_us: summary.max,
        });
    }
    RunTelemetry {
        wall_clock_secs: started.elapsed().as_secs_f64(),
        total_live_calls: total_live,
        total_cache_hits: total_hits,
        backends: rows,
    }
}

fn dataset_file_name(config: &ExperimentConfig) -> String {
    config
        .dataset
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string()
}

fn report_notes(config: &ExperimentConfig) -> Vec<String> {
    vec![
        "generative correctness: exact match after normalization (case-fold, trim, strip \
         trailing periods); gold alias sets are supported"
            .into(),
        "multiple-choice scoring: length-normalized continuation log-probability, answer is the \
         argmax option, ties to the lowest index"
            .into(),
        "uncertainty scores are used as each model produces them; no cross-model recalibration \
         is applied"
            .into(),
        format!("equivalence judge: {}", config.uncertainty.judge.label()),
        "split sampling is seeded and without replacement; validation size is round-half-up of \
         fraction * n"
            .into(),
        "confident-correct distribution: examples where two or more correct models share the \
         minimal uncertainty are counted in the tied bucket, not per model"
            .into(),
    ]
}

fn build_report(
    config: &ExperimentConfig,
    context: &RunContext,
    evaluation: &PoolEvaluation,
    outcome: &FusionOutcome,
    k: usize,
    k_tuned: bool,
) -> Result<RunReport, HarnessError> {
    let selected: std::collections::BTreeSet<&str> = outcome
        .selection
        .members
        .iter()
        .map(|m| m.backend_id.as_str())
        .collect();
    let mut profiles: Vec<ProfileRow> = evaluation
        .profiles
        .iter()
        .map(|c| ProfileRow {
            backend_id: c.profile.backend_id.clone(),
            accuracy: c.profile.accuracy,
            sah: c.profile.sah,
            cscore: c.profile.cscore,
            n_examples: c.profile.n_examples,
            degenerate_sah: c.degenerate_sah,
            selected: selected.contains(c.profile.backend_id.as_str()),
        })
        .collect();
    profiles.sort_by(|a, b| a.backend_id.cmp(&b.backend_id));

    let test_traces: report::TracesByBackend = evaluation
        .test_answers
        .iter()
        .map(|(id, answers)| {
            (
                id.clone(),
                answers
                    .iter()
                    .map(|a| {
                        TraceRecord::from_answer(
                            a,
                            report::SplitSide::Test,
                            &config.uncertainty.method,
                        )
                    })
                    .collect(),
            )
        })
        .collect();
    let auroc_table = report::auroc_table(&test_traces, &config.uncertainty.method);
    let complementarity = report::complementarity_report(&test_traces)?;
    let confident_correct = report::confident_correct_distribution(&test_traces)?;

    Ok(RunReport {
        config: ConfigSnapshot {
            dataset_file: dataset_file_name(config),
            dataset_sha256: context.dataset_sha256.clone(),
            validation_fraction: config.validation_fraction,
            split_seed: config.split_seed,
            uncertainty: config.uncertainty.clone(),
            k,
            k_tuned,
            criterion: config.criterion.name().to_string(),
            max_tokens: config.max_tokens,
            prompts: config.prompts.clone(),
            pool: context.pool.backends.clone(),
        },
        n_validation: context.split.validation.len(),
        n_test: context.split.test.len(),
        profiles,
        selection: outcome.selection.clone(),
        ensemble_accuracy: outcome.ensemble_accuracy,
        criterion_accuracies: outcome.criterion_accuracies.clone(),
        auroc_table,
        complementarity,
        confident_correct,
        notes: report_notes(config),
    })
}

fn write_error_marker(output_dir: &Path, error: &HarnessError) {
    #[derive(Serialize)]
    struct Marker<'a> {
        status: &'a str,
        kind: &'a str,
        error: String,
    }
    let marker = Marker {
        status: "incomplete",
        kind: error.kind(),
        error: error.to_string(),
    };
    if std::fs::create_dir_all(output_dir).is_ok() {
        let _ = report::write_json(&output_dir.join(files::ERROR), &marker);
    }
}

fn write_run_artifacts(
    config: &ExperimentConfig,
    evaluation: &PoolEvaluation,
    outcome: &FusionOutcome,
    run_report: &RunReport,
    telemetry: &RunTelemetry,
) -> Result<(), HarnessError> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    report::write_json(&dir.join(files::REPORT), run_report)?;
    report::write_json(&dir.join(files::TELEMETRY), telemetry)?;
    report::write_profiles_csv(&dir.join(files::PROFILES), &run_report.profiles)?;
    report::write_auroc_csv(&dir.join(files::AUROC), &run_report.auroc_table)?;
    report::write_complementarity_csv(
        &dir.join(files::COMPLEMENTARITY),
        &run_report.complementarity,
    )?;
    report::write_fig1_csv(&dir.join(files::FIG1), &run_report.confident_correct)?;
    report::write_decisions(&dir.join(files::DECISIONS), &outcome.decisions)?;
    let traces_dir = dir.join(files::TRACES_DIR);
    for (backend_id, test_answers) in &evaluation.test_answers {
        let validation_answers = &evaluation.validation_answers[backend_id];
        report::write_traces(
            &traces_dir,
            backend_id,
            validation_answers,
            test_answers,
            &config.uncertainty.method,
        )?;
    }
    Ok(())
}

/// Full pipeline: profile, select, fuse, evaluate, and write every artifact.
pub fn cmd_run(
    config: &ExperimentConfig,
    registry: &EstimatorRegistry,
) -> Result<RunOutput, HarnessError> {
    let result = run_inner(config, registry);
    if let Err(error) = &result {
        write_error_marker(&config.output_dir, error);
    }
    result
}

fn run_inner(
    config: &ExperimentConfig,
    registry: &EstimatorRegistry,
) -> Result<RunOutput, HarnessError> {
    let started = Instant::now();
    let context = prepare(config, registry)?;
    let settings = uncertainty_settings(config);
    let judge = build_judge(&config.uncertainty.judge, &context.backends)?;
    let evaluator = Evaluator {
        templates: &config.prompts,
        settings: &settings,
        registry,
        judge: &judge,
        max_tokens: config.max_tokens,
        concurrency: config.concurrency,
    };
    let evaluation = ensemble::evaluate_pool(&evaluator, &context.backends, &context.split)?;
    let (k, k_tuned) = if config.tune_k {
        (tune_k(&evaluation, &context.split, config, &judge)?, true)
    } else {
        let k = config.k.ok_or_else(|| HarnessError::Config {
            path: None,
            message: "cmd_run requires k (or tune_k)".into(),
        })?;
        (k, false)
    };
    let outcome = ensemble::fuse_pool(&evaluation, &context.split, k, config.criterion, &judge)?;
    let run_report = build_report(config, &context, &evaluation, &outcome, k, k_tuned)?;
    let telemetry = collect_telemetry(&context.backends, started);
    write_run_artifacts(config, &evaluation, &outcome, &run_report, &telemetry)?;
    // a fresh complete run supersedes any stale failure marker
    let _ = std::fs::remove_file(config.output_dir.join(files::ERROR));
    Ok(RunOutput {
        report: run_report,
        telemetry,
        output_dir: config.output_dir.clone(),
    })
}

/// One selection + fusion per K over a single set of model responses;
/// models are queried once and every K reuses the same answers.
pub fn cmd_sweep_k(
    config: &ExperimentConfig,
    ks_override: Option<&[usize]>,
    registry: &EstimatorRegistry,
) -> Result<(Vec<KSweepPoint>, RunTelemetry), HarnessError> {
    let result = sweep_inner(config, ks_override, registry);
    if let Err(error) = &result {
        write_error_marker(&config.output_dir, error);
    }
    result
}

fn sweep_inner(
    config: &ExperimentConfig,
    ks_override: Option<&[usize]>,
    registry: &EstimatorRegistry,
) -> Result<(Vec<KSweepPoint>, RunTelemetry), HarnessError> {
    let started = Instant::now();
    let context = prepare(config, registry)?;
    let mut ks: Vec<usize> = match ks_override {
        Some(ks) => ks.to_vec(),
        None => config.k_sweep.clone().ok_or_else(|| HarnessError::Config {
            path: None,
            message: "cmd_sweep_k requires k_sweep in the config or an explicit k range".into(),
        })?,
    };
    ks.sort_unstable();
    ks.dedup();
    let n = context.pool.backends.len();
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > n) {
        return Err(HarnessError::Config {
            path: None,
            message: format!("k sweep values must lie in [1, {n}], got {ks:?}"),
        });
    }
    let settings = uncertainty_settings(config);
    let judge = build_judge(&config.uncertainty.judge, &context.backends)?;
    let evaluator = Evaluator {
        templates: &config.prompts,
        settings: &settings,
        registry,
        judge: &judge,
        max_tokens: config.max_tokens,
        concurrency: config.concurrency,
    };
    let evaluation = ensemble::evaluate_pool(&evaluator, &context.backends, &context.split)?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in &ks {
        let outcome =
            ensemble::fuse_pool(&evaluation, &context.split, k, config.criterion, &judge)?;
        points.push(KSweepPoint {
            k,
            ensemble_accuracy: outcome.ensemble_accuracy,
        });
    }
    std::fs::create_dir_all(&config.output_dir).map_err(|source| HarnessError::Io {
        path: config.output_dir.display().to_string(),
        source,
    })?;
    report::write_k_sweep_csv(&config.output_dir.join(files::K_SWEEP), &points)?;
    let telemetry = collect_telemetry(&context.backends, started);
    report::write_json(&config.output_dir.join(files::TELEMETRY), &telemetry)?;
    Ok((points, telemetry))
}

/// Regenerate one derived table from the persisted traces of a finished
/// run. Writes the same bytes `cmd_run` wrote.
pub fn cmd_report(kind: ReportKind, run_dir: &Path) -> Result<PathBuf, HarnessError> {
    let mut traces = report::read_traces(&run_dir.join(files::TRACES_DIR))?;
    if traces.is_empty() {
        return Err(HarnessError::Config {
            path: Some(run_dir.to_path_buf()),
            message: "no trace files found under traces/".into(),
        });
    }
    // cross-check against the run's model set so a wholly absent trace
    // file surfaces as missing pairs instead of silently shrinking tables
    if let Ok(bytes) = std::fs::read(run_dir.join(files::REPORT)) {
        if let Ok(run_report) = serde_json::from_slice::<RunReport>(&bytes) {
            for row in &run_report.profiles {
                traces.entry(row.backend_id.clone()).or_default();
            }
        }
    }
    let test = report::test_side(&traces);
    let method = test
        .values()
        .flat_map(|records| records.first())
        .map(|r| r.method.clone())
        .next()
        .unwrap_or_default();
    match kind {
        ReportKind::Rq1 => {
            let rows = report::auroc_table(&test, &method);
            let path = run_dir.join(files::AUROC);
            report::write_auroc_csv(&path, &rows)?;
            Ok(path)
        }
        ReportKind::Rq2 => {
            let matrix = report::complementarity_report(&test)?;
            let path = run_dir.join(files::COMPLEMENTARITY);
            report::write_complementarity_csv(&path, &matrix)?;
            Ok(path)
        }
        ReportKind::Fig1 => {
            let distribution = report::confident_correct_distribution(&test)?;
            let path = run_dir.join(files::FIG1);
            report::write_fig1_csv(&path, &distribution)?;
            Ok(path)
        }
    }
}

/// Summary returned by `cmd_validate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub n_examples: usize,
    pub n_backends: usize,
}

/// Full structural validation of a config file: referenced files exist and
/// parse, bounds hold, and the output directory is creatable.
pub fn cmd_validate(config_path: &Path) -> Result<ValidationSummary, HarnessError> {
    let config = load_experiment_config(config_path)?;
    let pool = config.validate()?;
    let dataset = dataset::load_dataset(&config.dataset)?;
    dataset::split(&dataset, config.validation_fraction, config.split_seed)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|source| HarnessError::Io {
        path: config.output_dir.display().to_string(),
        source,
    })?;
    Ok(ValidationSummary {
        n_examples: dataset.len(),
        n_backends: pool.backends.len(),
    })
}
