//! Shared builders for integration and acceptance tests.
#![allow(dead_code)] // each test binary uses a subset of these helpers

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use uaf_core::backend::{
    AccuracySpec, BackendDescriptor, BackendKind, CalibrationProfile, SimulationConfig,
};
use uaf_core::dataset::{QaExample, TaskSpec};
use uaf_core::harness::{ExperimentConfig, PoolConfig};

pub fn gen_example(id: &str, question: &str, gold: &str) -> QaExample {
    QaExample {
        id: id.into(),
        question: question.into(),
        task: TaskSpec::Generative {
            gold_aliases: vec![gold.into()],
        },
    }
}

/// `n` generative examples with unique questions and golds.
pub fn synthetic_dataset(n: usize) -> Vec<QaExample> {
    (0..n)
        .map(|i| {
            gen_example(
                &format!("ex-{i:03}"),
                &format!("Synthetic trivia question number {i:03}?"),
                &format!("answer-{i:03}"),
            )
        })
        .collect()
}

pub fn sim_descriptor(
    backend_id: &str,
    seed: u64,
    accuracy: f64,
    calibration: CalibrationProfile,
) -> BackendDescriptor {
    BackendDescriptor {
        backend_id: backend_id.into(),
        kind: BackendKind::Simulated(SimulationConfig {
            seed,
            accuracy: AccuracySpec::Global { accuracy },
            calibration,
        }),
    }
}

pub fn sim_descriptor_table(
    backend_id: &str,
    seed: u64,
    accuracy_table: BTreeMap<String, f64>,
    calibration: CalibrationProfile,
) -> BackendDescriptor {
    BackendDescriptor {
        backend_id: backend_id.into(),
        kind: BackendKind::Simulated(SimulationConfig {
            seed,
            accuracy: AccuracySpec::PerExample { accuracy_table },
            calibration,
        }),
    }
}

pub fn write_pool(path: &Path, backends: &[BackendDescriptor]) {
    let pool = PoolConfig {
        backends: backends.to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&pool).unwrap()).unwrap();
}

/// Config with fixed defaults; callers override fields as needed.
pub fn base_config(dataset: PathBuf, pool: PathBuf, output_dir: PathBuf) -> ExperimentConfig {
    serde_json::from_value(serde_json::json!({
        "dataset": dataset,
        "pool": pool,
        "output_dir": output_dir,
        "k": 1,
    }))
    .unwrap()
}

/// Repo-level fixtures directory (crates/core/../../fixtures).
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .canonicalize()
        .expect("fixtures directory exists")
}

/// A model's plain accuracy over its answers.
pub fn answer_accuracy(answers: &[uaf_core::eval::ModelAnswer]) -> f64 {
    answers.iter().filter(|a| a.correct).count() as f64 / answers.len() as f64
}
