//! Experiment and pool configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::ensemble::FusionCriterion;
use crate::eval::PromptTemplates;
use crate::uncertainty::EquivalenceJudgeConfig;

use super::HarnessError;

fn default_fraction() -> f64 {
    0.1
}

fn default_method() -> String {
    "perplexity".into()
}

fn default_samples() -> u32 {
    5
}

fn default_sample_temperature() -> f64 {
    0.7
}

fn default_criterion() -> FusionCriterion {
    FusionCriterion::UafProduct
}

fn default_max_tokens() -> u32 {
    32
}

fn default_concurrency() -> usize {
    4
}

/// Uncertainty section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_samples")]
    pub samples: u32,
    #[serde(default = "default_sample_temperature")]
    pub sample_temperature: f64,
    #[serde(default)]
    pub judge: EquivalenceJudgeConfig,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            samples: default_samples(),
            sample_temperature: default_sample_temperature(),
            judge: EquivalenceJudgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    pub pool: PathBuf,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    /// Ensemble size; required unless `tune_k` or `k_sweep` drives the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_sweep: Option<Vec<usize>>,
    /// Pick K by highest validation fusion accuracy instead of `k`.
    #[serde(default)]
    pub tune_k: bool,
    #[serde(default = "default_criterion")]
    pub criterion: FusionCriterion,
    pub output_dir: PathBuf,
    /// Response cache location; omit to disable caching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub prompts: PromptTemplates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub backends: Vec<BackendDescriptor>,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.backends.is_empty() {
            return Err(HarnessError::Config {
                path: None,
                message: "pool must contain at least one backend".into(),
            });
        }
        let mut ids = std::collections::HashSet::new();
        for descriptor in &self.backends {
            descriptor.validate()?;
            if !ids.insert(descriptor.backend_id.as_str()) {
                return Err(HarnessError::Config {
                    path: None,
                    message: format!("duplicate backend_id {:?} in pool", descriptor.backend_id),
                });
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Load an experiment config, resolving relative paths against the config
/// file's directory.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: format!("cannot read config: {e}"),
    })?;
    let mut config: ExperimentConfig =
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config {
            path: Some(path.to_path_buf()),
            message: format!("invalid config JSON: {e}"),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    config.dataset = resolve(base, &config.dataset);
    config.pool = resolve(base, &config.pool);
    config.output_dir = resolve(base, &config.output_dir);
    config.cache_dir = config.cache_dir.map(|c| resolve(base, &c));
    Ok(config)
}

pub fn load_pool_config(path: &Path) -> Result<PoolConfig, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: format!("cannot read pool config: {e}"),
    })?;
    let pool: PoolConfig = serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config {
        path: Some(path.to_path_buf()),
        message: format!("invalid pool config JSON: {e}"),
    })?;
    pool.validate()?;
    Ok(pool)
}

impl ExperimentConfig {
    /// Structural checks that need no backend queries: files exist and
    /// parse, numeric ranges hold, k bounds fit the pool.
    pub fn validate(&self) -> Result<PoolConfig, HarnessError> {
        let fail = |message: String| -> Result<PoolConfig, HarnessError> {
            Err(HarnessError::Config {
                path: None,
                message,
            })
        };
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if !self.dataset.exists() {
            return fail(format!(
                "dataset file {} does not exist",
                self.dataset.display()
            ));
        }
        if !self.pool.exists() {
            return fail(format!(
                "pool config {} does not exist",
                self.pool.display()
            ));
        }
        let pool = load_pool_config(&self.pool)?;
        let n = pool.backends.len();
        if let Some(k) = self.k {
            if k == 0 || k > n {
                return fail(format!("k = {k} outside [1, {n}]"));
            }
        }
        if let Some(ks) = &self.k_sweep {
            if ks.is_empty() {
                return fail("k_sweep must be non-empty".into());
            }
            for &k in ks {
                if k == 0 || k > n {
                    return fail(format!("k_sweep value {k} outside [1, {n}]"));
                }
            }
        }
        if self.k.is_none() && !self.tune_k && self.k_sweep.is_none() {
            return fail("one of k, tune_k, or k_sweep is required".into());
        }
        if self.uncertainty.method.is_empty() {
            return fail("uncertainty.method must be non-empty".into());
        }
        if self.uncertainty.method == "semantic_entropy" && self.uncertainty.samples < 2 {
            return fail(format!(
                "semantic_entropy needs at least 2 samples, got {}",
                self.uncertainty.samples
            ));
        }
        if let EquivalenceJudgeConfig::TokenJaccard { threshold } = self.uncertainty.judge {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return fail(format!("jaccard threshold {threshold} outside (0, 1]"));
            }
        }
        if let EquivalenceJudgeConfig::BackendEntailment { judge_backend } = &self.uncertainty.judge
        {
            if !pool.backends.iter().any(|b| &b.backend_id == judge_backend) {
                return fail(format!(
                    "judge backend {judge_backend:?} is not in the pool"
                ));
            }
        }
        Ok(pool)
    }
}
