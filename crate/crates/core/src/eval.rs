//! Per-model evaluation: prompt each backend over a set of examples and
//! derive answer, uncertainty, and correctness for every one.
//!
//! Multiple-choice answers come from length-normalized option scoring
//! (argmax, ties to the lowest index); generative answers from a greedy
//! completion. Semantic entropy additionally draws a sampled batch.
//! Examples evaluate in parallel up to the per-backend concurrency limit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    argmax_lowest, score_choices, BackendError, CachingBackend, GenerationRequest, ModelBackend,
};
use crate::dataset::{score_correctness, DatasetError, QaExample, TaskSpec};
use crate::uncertainty::{
    perplexity_uncertainty, semantic_entropy_uncertainty, AnswerJudge, EstimatorInput,
    EstimatorRegistry, UncertaintyError, UncertaintyScore,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("failed to build worker pool: {0}")]
    WorkerPool(String),
}

/// Zero-shot prompt templates, one per task kind; `{question}` is replaced
/// with the example's question. The rendered prompt feeds cache keys, so
/// editing a template invalidates cached responses naturally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    #[serde(default = "default_generative_template")]
    pub generative: String,
    #[serde(default = "default_multiple_choice_template")]
    pub multiple_choice: String,
}

fn default_generative_template() -> String {
    "Answer the question with a short factual answer.\nQuestion: {question}\nAnswer:".into()
}

fn default_multiple_choice_template() -> String {
    "Choose the best answer to the question.\nQuestion: {question}\nAnswer:".into()
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            generative: default_generative_template(),
            multiple_choice: default_multiple_choice_template(),
        }
    }
}

impl PromptTemplates {
    pub fn render(&self, example: &QaExample) -> String {
        let template = match example.task {
            TaskSpec::MultipleChoice { .. } => &self.multiple_choice,
            TaskSpec::Generative { .. } => &self.generative,
        };
        template.replace("{question}", &example.question)
    }
}

fn default_samples() -> u32 {
    5
}

fn default_sample_temperature() -> f64 {
    0.7
}

/// Uncertainty method selection: the two built-ins by name, anything else
/// resolved through the estimator registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySettings {
    pub method: String,
    #[serde(default = "default_samples")]
    pub samples: u32,
    #[serde(default = "default_sample_temperature")]
    pub sample_temperature: f64,
}

impl Default for UncertaintySettings {
    fn default() -> Self {
        Self {
            method: "perplexity".into(),
            samples: default_samples(),
            sample_temperature: default_sample_temperature(),
        }
    }
}

impl UncertaintySettings {
    fn needs_samples(&self) -> bool {
        self.method == "semantic_entropy"
    }

    /// Semantic entropy clusters sampled texts and never reads logprobs,
    /// so endpoints without logprob support stay usable with it; methods
    /// that do need logprobs surface a capability error instead.
    fn needs_logprobs(&self) -> bool {
        self.method != "semantic_entropy"
    }
}

/// One model's response to one example, with the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub example_id: String,
    pub backend_id: String,
    pub answer: String,
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<String>,
    pub uncertainty: UncertaintyScore,
    pub correct: bool,
}

/// Equivalence via a judge model: two answers are equivalent when each
/// entails the other. Symmetric by the bidirectional check, reflexive by
/// the short-circuit on equal texts.
pub struct EntailmentJudge<'a> {
    backend: &'a CachingBackend,
    max_tokens: u32,
}

impl<'a> EntailmentJudge<'a> {
    pub fn new(backend: &'a CachingBackend, max_tokens: u32) -> Self {
        Self {
            backend,
            max_tokens,
        }
    }

    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, UncertaintyError> {
        let prompt = format!(
            "Premise: {premise}\nHypothesis: {hypothesis}\nDoes the premise entail the hypothesis? Answer yes or no.\nAnswer:"
        );
        let mut request = GenerationRequest::greedy(prompt, self.max_tokens);
        request.want_logprobs = false;
        let result = self
            .backend
            .generate(&request)
            .map_err(|e| UncertaintyError::Judge(e.to_string()))?;
        let verdict = result.completions[0].text.to_lowercase();
        Ok(verdict
            .split_whitespace()
            .next()
            .is_some_and(|w| w.starts_with("yes")))
    }
}

impl AnswerJudge for EntailmentJudge<'_> {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool, UncertaintyError> {
        if a == b {
            return Ok(true);
        }
        Ok(self.entails(a, b)? && self.entails(b, a)?)
    }
}

pub struct Evaluator<'a> {
    pub templates: &'a PromptTemplates,
    pub settings: &'a UncertaintySettings,
    pub registry: &'a EstimatorRegistry,
    pub judge: &'a dyn AnswerJudge,
    pub max_tokens: u32,
    /// In-flight request limit per backend.
    pub concurrency: usize,
}

impl<'a> Evaluator<'a> {
    fn eval_one(
        &self,
        backend: &CachingBackend,
        example: &QaExample,
    ) -> Result<ModelAnswer, EvalError> {
        let prompt = self.templates.render(example);
        let (answer, token_logprobs) = match &example.task {
            TaskSpec::MultipleChoice { options, .. } => {
                let scores = score_choices(backend, &prompt, options)?;
                let chosen = argmax_lowest(&scores);
                // The normalized choice score is a per-token mean logprob,
                // so it stands in for the answer's token evidence.
                (options[chosen].clone(), vec![scores[chosen]])
            }
            TaskSpec::Generative { .. } => {
                let mut request = GenerationRequest::greedy(prompt.clone(), self.max_tokens);
                request.want_logprobs = self.settings.needs_logprobs();
                let result = backend.generate(&request)?;
                let completion = &result.completions[0];
                (
                    completion.text.trim().to_string(),
                    completion.token_logprobs.clone(),
                )
            }
        };

        let samples: Vec<String> = if self.settings.needs_samples() {
            let mut request = GenerationRequest::sampled(
                prompt,
                self.max_tokens,
                self.settings.samples,
                self.settings.sample_temperature,
            );
            request.want_logprobs = self.settings.needs_logprobs();
            backend
                .generate(&request)?
                .completions
                .iter()
                .map(|c| c.text.trim().to_string())
                .collect()
        } else {
            Vec::new()
        };

        let uncertainty = match self.settings.method.as_str() {
            "perplexity" => perplexity_uncertainty(&token_logprobs)?,
            "semantic_entropy" => semantic_entropy_uncertainty(&samples, self.judge)?,
            name => self.registry.estimate(
                name,
                &EstimatorInput {
                    backend_id: backend.backend_id(),
                    example,
                    answer_text: &answer,
                    token_logprobs: &token_logprobs,
                    samples: &samples,
                },
            )?,
        };

        let correct = score_correctness(example, &answer)?;
        Ok(ModelAnswer {
            example_id: example.id.clone(),
            backend_id: backend.backend_id().to_string(),
            answer,
            token_logprobs,
            samples,
            uncertainty,
            correct,
        })
    }

    /// Evaluate one backend over a list of examples, preserving example
    /// order.
    pub fn evaluate(
        &self,
        backend: &CachingBackend,
        examples: &[QaExample],
    ) -> Result<Vec<ModelAnswer>, EvalError> {
        let threads = self.concurrency.max(1);
        if threads == 1 || examples.len() <= 1 {
            return examples
                .iter()
                .map(|ex| self.eval_one(backend, ex))
                .collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| EvalError::WorkerPool(e.to_string()))?;
        pool.install(|| {
            examples
                .par_iter()
                .map(|ex| self.eval_one(backend, ex))
                .collect()
        })
    }
}
