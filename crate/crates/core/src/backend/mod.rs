//! Uniform contract for querying language models.
//!
//! A backend is either a live OpenAI-compatible HTTP endpoint or a
//! deterministic simulation; both sit behind [`ModelBackend`] and are
//! normally wrapped in a [`CachingBackend`] so repeated experiments replay
//! from disk instead of re-querying.

mod cache;
mod http;
mod sim;

pub use cache::{cache_key, CacheKey, CachingBackend, ResponseCache};
pub use http::HttpBackend;
pub use sim::{AnswerKey, SimulatedBackend};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("invalid generation request: {message}")]
    InvalidRequest { message: String },
    #[error("backend {backend_id} unavailable: {message}")]
    Unavailable { backend_id: String, message: String },
    #[error("backend {backend_id} lacks a required capability: {message}")]
    Capability { backend_id: String, message: String },
    #[error("backend {backend_id} returned a malformed response: {message}")]
    MalformedResponse { backend_id: String, message: String },
    #[error("auth token env var {env_var} for backend {backend_id} is not set")]
    MissingAuthToken { backend_id: String, env_var: String },
    #[error("invalid backend descriptor {backend_id:?}: {message}")]
    InvalidDescriptor { backend_id: String, message: String },
    #[error("cache store unwritable: {0}")]
    CacheUnwritable(String),
}

/// One query to a model: a greedy answer, a sampled batch, or a request to
/// score fixed continuations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub n_samples: u32,
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring_continuations: Option<Vec<String>>,
}

impl GenerationRequest {
    pub fn greedy(prompt: String, max_tokens: u32) -> Self {
        Self {
            prompt,
            max_tokens,
            temperature: 0.0,
            n_samples: 1,
            want_logprobs: true,
            scoring_continuations: None,
        }
    }

    pub fn sampled(prompt: String, max_tokens: u32, n_samples: u32, temperature: f64) -> Self {
        Self {
            prompt,
            max_tokens,
            temperature,
            n_samples,
            want_logprobs: true,
            scoring_continuations: None,
        }
    }

    pub fn scoring(prompt: String, continuations: Vec<String>) -> Self {
        Self {
            prompt,
            max_tokens: 0,
            temperature: 0.0,
            n_samples: 1,
            want_logprobs: true,
            scoring_continuations: Some(continuations),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |message: String| Err(BackendError::InvalidRequest { message });
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return fail(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            ));
        }
        if self.n_samples > 1 && self.temperature <= 0.0 {
            return fail("sampling more than one completion requires temperature > 0".into());
        }
        if let Some(continuations) = &self.scoring_continuations {
            if self.n_samples != 1 {
                return fail("scoring requests must use n_samples = 1".into());
            }
            if continuations.is_empty() {
                return fail("scoring_continuations must be non-empty".into());
            }
        }
        Ok(())
    }
}

/// One generated completion with its token-level evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Natural-log probabilities, one per generated token; empty when
    /// logprobs were not requested.
    pub token_logprobs: Vec<f64>,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub completions: Vec<Completion>,
    /// Length-normalized log-probability per scoring continuation,
    /// present iff the request carried `scoring_continuations`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation_scores: Option<Vec<f64>>,
    pub backend_id: String,
    pub cached: bool,
}

impl GenerationResult {
    /// Enforce result invariants after every backend path.
    pub fn validate_against(&self, request: &GenerationRequest) -> Result<(), BackendError> {
        let fail = |message: String| {
            Err(BackendError::MalformedResponse {
                backend_id: self.backend_id.clone(),
                message,
            })
        };
        match (&request.scoring_continuations, &self.continuation_scores) {
            (Some(continuations), Some(scores)) => {
                if scores.len() != continuations.len() {
                    return fail(format!(
                        "expected {} continuation scores, got {}",
                        continuations.len(),
                        scores.len()
                    ));
                }
                if scores.iter().any(|s| !s.is_finite() || *s > 0.0) {
                    return fail("continuation scores must be finite non-positive".into());
                }
            }
            (Some(_), None) => {
                return fail("scoring request produced no continuation scores".into())
            }
            (None, Some(_)) => return fail("unsolicited continuation scores".into()),
            (None, None) => {
                if self.completions.len() != request.n_samples as usize {
                    return fail(format!(
                        "expected {} completions, got {}",
                        request.n_samples,
                        self.completions.len()
                    ));
                }
            }
        }
        for completion in &self.completions {
            if completion.token_count == 0 {
                return fail("completion token_count must be positive".into());
            }
            if completion
                .token_logprobs
                .iter()
                .any(|lp| !lp.is_finite() || *lp > 0.0)
            {
                return fail("token logprobs must be finite and non-positive".into());
            }
            if request.want_logprobs
                && request.scoring_continuations.is_none()
                && completion.token_logprobs.is_empty()
            {
                return Err(BackendError::Capability {
                    backend_id: self.backend_id.clone(),
                    message: "logprobs requested but not returned".into(),
                });
            }
        }
        Ok(())
    }
}

/// Simulated-model self-assessment behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationProfile {
    /// Uncertainty is informative: wrong answers tend to score higher.
    Calibrated,
    /// Uncertainty compressed low regardless of correctness.
    Overconfident,
    /// Uncertainty inverted: wrong answers tend to score lower.
    Anticalibrated,
    /// Uncertainty independent of correctness.
    Uninformative,
}

/// Either one global correctness probability or a per-example table keyed by
/// example id (absent ids count as probability 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AccuracySpec {
    Global {
        accuracy: f64,
    },
    PerExample {
        accuracy_table: BTreeMap<String, f64>,
    },
}

impl AccuracySpec {
    pub fn probability_for(&self, example_id: &str) -> f64 {
        match self {
            AccuracySpec::Global { accuracy } => *accuracy,
            AccuracySpec::PerExample { accuracy_table } => {
                accuracy_table.get(example_id).copied().unwrap_or(0.0)
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        let check = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("accuracy {p} outside [0, 1]"))
            }
        };
        match self {
            AccuracySpec::Global { accuracy } => check(*accuracy),
            AccuracySpec::PerExample { accuracy_table } => {
                accuracy_table.values().try_for_each(|p| check(*p))
            }
        }
    }
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_retries() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpointConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token; tokens
    /// never appear in config files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub accuracy: AccuracySpec,
    pub calibration: CalibrationProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    HttpOpenaiCompatible(HttpEndpointConfig),
    Simulated(SimulationConfig),
}

/// One entry of the pool configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
}

impl BackendDescriptor {
    /// Backend ids become cache directory names, so keep them path-safe.
    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |message: String| {
            Err(BackendError::InvalidDescriptor {
                backend_id: self.backend_id.clone(),
                message,
            })
        };
        if self.backend_id.is_empty() {
            return fail("backend_id must be non-empty".into());
        }
        if !self
            .backend_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return fail("backend_id may contain only [A-Za-z0-9._-]".into());
        }
        if let BackendKind::Simulated(sim) = &self.kind {
            if let Err(message) = sim.accuracy.validate() {
                return fail(message);
            }
        }
        Ok(())
    }
}

/// Query surface shared by live and simulated backends. Implementations are
/// immutable and safe for concurrent calls.
pub trait ModelBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Identity string folded into cache keys: the endpoint model name for
    /// HTTP backends, seed and profile for simulated ones.
    fn model_ident(&self) -> String;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

/// Length-normalized log-probability per option; the caller's answer is the
/// argmax (ties break to the lowest index).
pub fn score_choices(
    backend: &dyn ModelBackend,
    question_prompt: &str,
    options: &[String],
) -> Result<Vec<f64>, BackendError> {
    if options.len() < 2 {
        return Err(BackendError::InvalidRequest {
            message: format!("need at least 2 options to score, got {}", options.len()),
        });
    }
    let request = GenerationRequest::scoring(question_prompt.to_string(), options.to_vec());
    let result = backend.generate(&request)?;
    result
        .continuation_scores
        .ok_or_else(|| BackendError::MalformedResponse {
            backend_id: backend.backend_id().to_string(),
            message: "scoring request produced no continuation scores".into(),
        })
}

/// Index of the maximal score, lowest index on ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Instantiate a backend from its descriptor. Simulated backends need the
/// dataset-derived [`AnswerKey`]; live backends ignore it.
pub fn build_backend(
    descriptor: &BackendDescriptor,
    answer_key: Option<Arc<AnswerKey>>,
) -> Result<Box<dyn ModelBackend>, BackendError> {
    descriptor.validate()?;
    match &descriptor.kind {
        BackendKind::HttpOpenaiCompatible(config) => Ok(Box::new(HttpBackend::new(
            descriptor.backend_id.clone(),
            config.clone(),
        )?)),
        BackendKind::Simulated(config) => {
            let key = answer_key.ok_or_else(|| BackendError::InvalidDescriptor {
                backend_id: descriptor.backend_id.clone(),
                message: "simulated backends require an answer key".into(),
            })?;
            Ok(Box::new(SimulatedBackend::new(
                descriptor.backend_id.clone(),
                config.clone(),
                key,
            )))
        }
    }
}
