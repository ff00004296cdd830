//! Deterministic simulated backends.
//!
//! A simulated model answers correctly with a configured probability and
//! emits synthetic token logprobs whose derived perplexity uncertainty
//! follows its calibration profile. Every draw is a pure function of
//! (simulation seed, backend id, example id), so whole experiments replay
//! byte-identically and live/simulated runs share the same uncertainty code
//! paths.

use std::sync::Arc;

use crate::dataset::{QaExample, TaskSpec};
use crate::hashing::{stable_u01, stable_u64};

use super::{
    BackendError, CalibrationProfile, Completion, GenerationRequest, GenerationResult,
    ModelBackend, SimulationConfig,
};

/// Gold material a simulation needs to decide and phrase its answers.
/// Built from the dataset by the harness; ground truth never leaves the
/// process.
pub struct AnswerKey {
    entries: Vec<KeyEntry>,
}

struct KeyEntry {
    id: String,
    question: String,
    task: TaskSpec,
}

impl AnswerKey {
    pub fn new(examples: &[QaExample]) -> Self {
        Self {
            entries: examples
                .iter()
                .map(|ex| KeyEntry {
                    id: ex.id.clone(),
                    question: ex.question.clone(),
                    task: ex.task.clone(),
                })
                .collect(),
        }
    }

    /// Match a prompt back to its example by question text. Longest match
    /// wins so questions that prefix other questions resolve correctly.
    fn find(&self, prompt: &str) -> Option<&KeyEntry> {
        self.entries
            .iter()
            .filter(|e| !e.question.is_empty() && prompt.contains(&e.question))
            .max_by_key(|e| e.question.len())
    }
}

pub struct SimulatedBackend {
    backend_id: String,
    config: SimulationConfig,
    key: Arc<AnswerKey>,
}

/// Uncertainty ranges per (profile, correctness); draws are uniform inside.
fn uncertainty_range(profile: CalibrationProfile, correct: bool) -> (f64, f64) {
    match (profile, correct) {
        (CalibrationProfile::Calibrated, true) => (0.10, 0.80),
        (CalibrationProfile::Calibrated, false) => (0.50, 0.95),
        (CalibrationProfile::Overconfident, true) => (0.02, 0.30),
        (CalibrationProfile::Overconfident, false) => (0.05, 0.45),
        (CalibrationProfile::Anticalibrated, true) => (0.55, 0.95),
        (CalibrationProfile::Anticalibrated, false) => (0.02, 0.25),
        (CalibrationProfile::Uninformative, _) => (0.15, 0.85),
    }
}

fn whitespace_token_count(text: &str) -> u32 {
    text.split_whitespace().count().max(1) as u32
}

impl SimulatedBackend {
    pub fn new(backend_id: String, config: SimulationConfig, key: Arc<AnswerKey>) -> Self {
        Self {
            backend_id,
            config,
            key,
        }
    }

    fn draw_u01(&self, salt: &str, example_id: &str, extra: u64) -> f64 {
        stable_u01(&[
            salt.as_bytes(),
            &self.config.seed.to_be_bytes(),
            self.backend_id.as_bytes(),
            example_id.as_bytes(),
            &extra.to_be_bytes(),
        ])
    }

    fn draw_u64(&self, salt: &str, example_id: &str, extra: u64) -> u64 {
        stable_u64(&[
            salt.as_bytes(),
            &self.config.seed.to_be_bytes(),
            self.backend_id.as_bytes(),
            example_id.as_bytes(),
            &extra.to_be_bytes(),
        ])
    }

    fn is_correct(&self, example_id: &str) -> bool {
        let p = self.config.accuracy.probability_for(example_id);
        self.draw_u01("sim-correct", example_id, 0) < p
    }

    fn target_uncertainty(&self, example_id: &str, correct: bool) -> f64 {
        let (lo, hi) = uncertainty_range(self.config.calibration, correct);
        lo + (hi - lo) * self.draw_u01("sim-unc", example_id, 0)
    }

    /// The answer this model gives for an example: the gold text when the
    /// correctness draw succeeds, a deterministic distractor otherwise.
    fn answer_for(&self, entry: &KeyEntry, correct: bool) -> String {
        match &entry.task {
            TaskSpec::MultipleChoice {
                options,
                gold_index,
            } => {
                let idx = if correct {
                    *gold_index
                } else {
                    let offset = (self.draw_u64("sim-wrong", &entry.id, 0)
                        % (options.len() as u64 - 1)) as usize;
                    (*gold_index + 1 + offset) % options.len()
                };
                options[idx].clone()
            }
            TaskSpec::Generative { gold_aliases } => {
                if correct {
                    gold_aliases[0].clone()
                } else {
                    format!(
                        "unsupported-{:08x}",
                        self.draw_u64("sim-wrong", &entry.id, 0) as u32
                    )
                }
            }
        }
    }

    /// A sampled alternative answer, distinct from the greedy one.
    fn variant_for(&self, entry: &KeyEntry, greedy: &str, sample_idx: u64) -> String {
        match &entry.task {
            TaskSpec::MultipleChoice { options, .. } => {
                let greedy_idx = options.iter().position(|o| o == greedy).unwrap_or(0);
                let offset = (self.draw_u64("sim-variant", &entry.id, sample_idx)
                    % (options.len() as u64 - 1)) as usize;
                options[(greedy_idx + 1 + offset) % options.len()].clone()
            }
            TaskSpec::Generative { .. } => format!(
                "variant-{sample_idx}-{:06x}",
                self.draw_u64("sim-variant", &entry.id, sample_idx) as u32 & 0xff_ffff
            ),
        }
    }

    fn completion(&self, text: String, uncertainty: f64) -> Completion {
        let token_count = whitespace_token_count(&text);
        // Every token at ln(1 - u): the derived perplexity uncertainty
        // recovers u exactly.
        let logprob = (1.0 - uncertainty).ln();
        Completion {
            token_logprobs: vec![logprob; token_count as usize],
            token_count,
            text,
        }
    }

    fn generate_known(&self, entry: &KeyEntry, request: &GenerationRequest) -> GenerationResult {
        let correct = self.is_correct(&entry.id);
        let uncertainty = self.target_uncertainty(&entry.id, correct);
        let greedy = self.answer_for(entry, correct);

        if let Some(options) = &request.scoring_continuations {
            let chosen_score = (1.0 - uncertainty).ln();
            let scores = options
                .iter()
                .map(|option| {
                    if *option == greedy {
                        chosen_score
                    } else {
                        // Margin keyed on the option text so duplicated
                        // options tie exactly.
                        let gap = 0.3
                            + 0.7
                                * stable_u01(&[
                                    b"sim-opt",
                                    &self.config.seed.to_be_bytes(),
                                    self.backend_id.as_bytes(),
                                    entry.id.as_bytes(),
                                    option.as_bytes(),
                                ]);
                        chosen_score - gap
                    }
                })
                .collect();
            return GenerationResult {
                completions: Vec::new(),
                continuation_scores: Some(scores),
                backend_id: self.backend_id.clone(),
                cached: false,
            };
        }

        let mut completions = Vec::with_capacity(request.n_samples as usize);
        completions.push(self.completion(greedy.clone(), uncertainty));
        for m in 1..request.n_samples as u64 {
            // Samples agree with the greedy answer at rate 1 - u, so
            // cluster spread tracks the calibration profile.
            let agrees = self.draw_u01("sim-agree", &entry.id, m) >= uncertainty;
            let text = if agrees {
                greedy.clone()
            } else {
                self.variant_for(entry, &greedy, m)
            };
            completions.push(self.completion(text, uncertainty));
        }
        GenerationResult {
            completions,
            continuation_scores: None,
            backend_id: self.backend_id.clone(),
            cached: false,
        }
    }

    /// Prompts that match no known question (e.g. free-form probes) get a
    /// deterministic low-information response.
    fn generate_unknown(&self, request: &GenerationRequest) -> GenerationResult {
        let pseudo_id = format!(
            "prompt-{:016x}",
            stable_u64(&[b"sim-unknown", request.prompt.as_bytes()])
        );
        let uncertainty = {
            let (lo, hi) = uncertainty_range(CalibrationProfile::Uninformative, false);
            lo + (hi - lo) * self.draw_u01("sim-unc", &pseudo_id, 0)
        };
        if let Some(options) = &request.scoring_continuations {
            let chosen =
                (self.draw_u64("sim-choice", &pseudo_id, 0) % options.len() as u64) as usize;
            let base = (1.0 - uncertainty).ln();
            let scores = options
                .iter()
                .enumerate()
                .map(|(i, option)| {
                    if option == &options[chosen] {
                        base
                    } else {
                        base - 0.3
                            - 0.7
                                * stable_u01(&[
                                    b"sim-opt",
                                    &self.config.seed.to_be_bytes(),
                                    self.backend_id.as_bytes(),
                                    pseudo_id.as_bytes(),
                                    option.as_bytes(),
                                    &(i as u64).to_be_bytes(),
                                ])
                    }
                })
                .collect();
            return GenerationResult {
                completions: Vec::new(),
                continuation_scores: Some(scores),
                backend_id: self.backend_id.clone(),
                cached: false,
            };
        }
        let completions = (0..request.n_samples as u64)
            .map(|m| {
                self.completion(
                    format!(
                        "unresolved-{:08x}",
                        self.draw_u64("sim-text", &pseudo_id, m) as u32
                    ),
                    uncertainty,
                )
            })
            .collect();
        GenerationResult {
            completions,
            continuation_scores: None,
            backend_id: self.backend_id.clone(),
            cached: false,
        }
    }
}

impl ModelBackend for SimulatedBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn model_ident(&self) -> String {
        let accuracy_tag = match &self.config.accuracy {
            super::AccuracySpec::Global { accuracy } => format!("g{accuracy}"),
            super::AccuracySpec::PerExample { accuracy_table } => format!(
                "t{:016x}",
                stable_u64(&[serde_json::to_string(accuracy_table)
                    .expect("table serializes")
                    .as_bytes()])
            ),
        };
        format!(
            "sim:{}:{:?}:{}",
            self.config.seed, self.config.calibration, accuracy_tag
        )
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let result = match self.key.find(&request.prompt) {
            Some(entry) => self.generate_known(entry, request),
            None => self.generate_unknown(request),
        };
        result.validate_against(request)?;
        Ok(result)
    }
}
