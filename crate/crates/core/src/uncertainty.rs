//! Normalized uncertainty scores for model responses.
//!
//! Every estimator maps response evidence to a value in [0, 1]; higher means
//! the model is more likely hallucinating. Two estimators are built in
//! (token-level perplexity and semantic entropy over sampled generations),
//! and a registry accepts additional ones selectable by name from experiment
//! config.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_answer, QaExample};

#[derive(Debug, thiserror::Error)]
pub enum UncertaintyError {
    #[error("token logprob list is empty")]
    EmptyLogprobs,
    #[error("token logprob {value} is not a finite non-positive number")]
    InvalidLogprob { value: f64 },
    #[error("semantic entropy needs at least 2 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("equivalence judge failed: {0}")]
    Judge(String),
    #[error("estimator {name:?} is already registered")]
    DuplicateEstimator { name: String },
    #[error("no estimator registered under {name:?}")]
    UnknownEstimator { name: String },
    #[error("estimator {name:?} produced value {value} outside [0, 1]")]
    ValueOutOfRange { name: String, value: f64 },
    #[error("jaccard threshold must lie in (0, 1], got {threshold}")]
    BadThreshold { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMethod {
    Perplexity,
    SemanticEntropy,
    External,
}

/// Method-specific summary retained for traces and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyEvidence {
    MeanLogprob { mean_logprob: f64 },
    ClusterSizes { sizes: Vec<usize> },
    External { detail: String },
}

/// A normalized uncertainty score in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub method: UncertaintyMethod,
    pub evidence: UncertaintyEvidence,
}

/// Largest f64 strictly below 1, used to keep perplexity uncertainty inside
/// [0, 1) when the mean logprob is so negative that `1 - e^m` rounds to 1.
fn largest_below_one() -> f64 {
    f64::from_bits(1.0f64.to_bits() - 1)
}

/// Perplexity-based uncertainty: with `m` the mean token logprob,
/// perplexity is `e^{-m}` and the score is `1 - e^m = 1 - 1/ppl`, which is
/// monotone in perplexity and lies in [0, 1).
pub fn perplexity_uncertainty(
    token_logprobs: &[f64],
) -> Result<UncertaintyScore, UncertaintyError> {
    if token_logprobs.is_empty() {
        return Err(UncertaintyError::EmptyLogprobs);
    }
    for &lp in token_logprobs {
        if !lp.is_finite() || lp > 0.0 {
            return Err(UncertaintyError::InvalidLogprob { value: lp });
        }
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    let value = (-mean.exp_m1()).min(largest_below_one()).max(0.0);
    Ok(UncertaintyScore {
        value,
        method: UncertaintyMethod::Perplexity,
        evidence: UncertaintyEvidence::MeanLogprob { mean_logprob: mean },
    })
}

/// Symmetric, reflexive equivalence over answer texts, used to cluster
/// sampled generations and to group majority-vote ballots.
pub trait AnswerJudge: Send + Sync {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool, UncertaintyError>;
}

/// Equality after exact-match normalization.
pub struct NormalizedExactJudge;

impl AnswerJudge for NormalizedExactJudge {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool, UncertaintyError> {
        Ok(normalize_answer(a) == normalize_answer(b))
    }
}

/// Jaccard overlap of lowercase whitespace tokens at or above a threshold.
pub struct TokenJaccardJudge {
    threshold: f64,
}

impl TokenJaccardJudge {
    pub fn new(threshold: f64) -> Result<Self, UncertaintyError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(UncertaintyError::BadThreshold { threshold });
        }
        Ok(Self { threshold })
    }
}

impl AnswerJudge for TokenJaccardJudge {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool, UncertaintyError> {
        let tokens = |s: &str| -> std::collections::BTreeSet<String> {
            s.to_lowercase()
                .split_whitespace()
                .map(|t| t.to_string())
                .collect()
        };
        let ta = tokens(a);
        let tb = tokens(b);
        if ta.is_empty() && tb.is_empty() {
            return Ok(true);
        }
        let inter = ta.intersection(&tb).count() as f64;
        let union = ta.union(&tb).count() as f64;
        Ok(inter / union >= self.threshold)
    }
}

/// Judge selection as it appears in experiment config. `backend_entailment`
/// is resolved against the pool at run time; the other two are
/// self-contained.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EquivalenceJudgeConfig {
    #[default]
    NormalizedExact,
    TokenJaccard {
        threshold: f64,
    },
    BackendEntailment {
        judge_backend: String,
    },
}

impl EquivalenceJudgeConfig {
    /// Short label recorded in reports.
    pub fn label(&self) -> String {
        match self {
            EquivalenceJudgeConfig::NormalizedExact => "normalized_exact".into(),
            EquivalenceJudgeConfig::TokenJaccard { threshold } => {
                format!("token_jaccard({threshold})")
            }
            EquivalenceJudgeConfig::BackendEntailment { judge_backend } => {
                format!("backend_entailment({judge_backend})")
            }
        }
    }
}

/// Greedy first-fit clustering: each sample joins the first cluster whose
/// representative (its earliest sample) it matches, else founds a new one.
pub fn cluster_samples(
    samples: &[String],
    judge: &dyn AnswerJudge,
) -> Result<Vec<usize>, UncertaintyError> {
    let mut representatives: Vec<&str> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    'next: for sample in samples {
        for (c, rep) in representatives.iter().enumerate() {
            if judge.equivalent(sample, rep)? {
                sizes[c] += 1;
                continue 'next;
            }
        }
        representatives.push(sample);
        sizes.push(1);
    }
    Ok(sizes)
}

/// Entropy over clusters of meaning-equivalent samples, normalized by
/// `ln(S)` so the score is comparable across sample counts.
pub fn semantic_entropy_uncertainty(
    samples: &[String],
    judge: &dyn AnswerJudge,
) -> Result<UncertaintyScore, UncertaintyError> {
    let s = samples.len();
    if s < 2 {
        return Err(UncertaintyError::TooFewSamples { got: s });
    }
    let sizes = cluster_samples(samples, judge)?;
    let value = normalized_cluster_entropy(&sizes);
    Ok(UncertaintyScore {
        value,
        method: UncertaintyMethod::SemanticEntropy,
        evidence: UncertaintyEvidence::ClusterSizes { sizes },
    })
}

/// `H / ln(S)` with `H = ln(S) - (1/S) * sum(c * ln c)`, exact at the
/// all-distinct (1.0) and single-cluster (0.0) extremes.
pub fn normalized_cluster_entropy(sizes: &[usize]) -> f64 {
    let s: usize = sizes.iter().sum();
    debug_assert!(s >= 2);
    let s_f = s as f64;
    let weighted: f64 = sizes
        .iter()
        .map(|&c| {
            let c = c as f64;
            c * c.ln()
        })
        .sum();
    let entropy = s_f.ln() - weighted / s_f;
    (entropy / s_f.ln()).clamp(0.0, 1.0)
}

/// Inputs available to an uncertainty estimator for one answered example.
pub struct EstimatorInput<'a> {
    pub backend_id: &'a str,
    pub example: &'a QaExample,
    pub answer_text: &'a str,
    /// Logprobs of the greedy answer: per-token values for generative
    /// answers, or the single length-normalized choice score for MC.
    pub token_logprobs: &'a [f64],
    /// Extra sampled generations (empty unless the method asked for them).
    pub samples: &'a [String],
}

pub trait UncertaintyEstimator: Send + Sync {
    fn estimate(&self, input: &EstimatorInput<'_>) -> Result<UncertaintyScore, UncertaintyError>;
}

impl<F> UncertaintyEstimator for F
where
    F: Fn(&EstimatorInput<'_>) -> Result<UncertaintyScore, UncertaintyError> + Send + Sync,
{
    fn estimate(&self, input: &EstimatorInput<'_>) -> Result<UncertaintyScore, UncertaintyError> {
        self(input)
    }
}

/// Registration point for uncertainty methods beyond the two built-ins.
/// Registered estimators are selectable by name in experiment config; their
/// output range is checked on every use.
#[derive(Default)]
pub struct EstimatorRegistry {
    estimators: BTreeMap<String, Arc<dyn UncertaintyEstimator>>,
}

impl EstimatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        estimator: Arc<dyn UncertaintyEstimator>,
    ) -> Result<(), UncertaintyError> {
        if name == "perplexity" || name == "semantic_entropy" || self.estimators.contains_key(name)
        {
            return Err(UncertaintyError::DuplicateEstimator { name: name.into() });
        }
        self.estimators.insert(name.to_string(), estimator);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.estimators.contains_key(name)
    }

    /// Run a registered estimator, rejecting any value outside [0, 1].
    pub fn estimate(
        &self,
        name: &str,
        input: &EstimatorInput<'_>,
    ) -> Result<UncertaintyScore, UncertaintyError> {
        let estimator = self
            .estimators
            .get(name)
            .ok_or_else(|| UncertaintyError::UnknownEstimator { name: name.into() })?;
        let score = estimator.estimate(input)?;
        if !score.value.is_finite() || !(0.0..=1.0).contains(&score.value) {
            return Err(UncertaintyError::ValueOutOfRange {
                name: name.into(),
                value: score.value,
            });
        }
        Ok(score)
    }
}

/// Test-support estimator: 0 when the answer is correct, 1 otherwise.
/// Reads gold labels, so it is only meaningful in harness self-checks.
pub fn oracle_estimator() -> Arc<dyn UncertaintyEstimator> {
    Arc::new(
        |input: &EstimatorInput<'_>| -> Result<UncertaintyScore, UncertaintyError> {
            let correct = crate::dataset::score_correctness(input.example, input.answer_text)
                .map_err(|e| UncertaintyError::Judge(e.to_string()))?;
            Ok(UncertaintyScore {
                value: if correct { 0.0 } else { 1.0 },
                method: UncertaintyMethod::External,
                evidence: UncertaintyEvidence::External {
                    detail: "oracle".into(),
                },
            })
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perplexity_certainty_is_zero() {
        let score = perplexity_uncertainty(&[0.0]).unwrap();
        assert_eq!(score.value, 0.0);
    }

    #[test]
    fn perplexity_closed_forms() {
        // every token at probability 1/2 -> perplexity 2 -> value 1 - 1/2
        let half = 0.5f64.ln();
        let score = perplexity_uncertainty(&[half, half, half]).unwrap();
        assert!((score.value - 0.5).abs() < 1e-12, "{}", score.value);
        // tokens at probability 1/4 -> perplexity 4 -> value 3/4
        let quarter = 0.25f64.ln();
        let score = perplexity_uncertainty(&[quarter, quarter]).unwrap();
        assert!((score.value - 0.75).abs() < 1e-12, "{}", score.value);
    }

    #[test]
    fn perplexity_rejects_bad_input() {
        assert!(matches!(
            perplexity_uncertainty(&[]),
            Err(UncertaintyError::EmptyLogprobs)
        ));
        assert!(matches!(
            perplexity_uncertainty(&[-1.0, 0.1]),
            Err(UncertaintyError::InvalidLogprob { .. })
        ));
        assert!(matches!(
            perplexity_uncertainty(&[f64::NAN]),
            Err(UncertaintyError::InvalidLogprob { .. })
        ));
    }

    #[test]
    fn perplexity_stays_below_one_at_extremes() {
        let score = perplexity_uncertainty(&[-800.0]).unwrap();
        assert!(score.value < 1.0);
        assert!(score.value > 0.999);
    }

    #[test]
    fn semantic_entropy_degenerate_and_max() {
        let judge = NormalizedExactJudge;
        let same = strs(&["Paris", "paris.", "PARIS", " paris", "Paris"]);
        let score = semantic_entropy_uncertainty(&same, &judge).unwrap();
        assert_eq!(score.value, 0.0);

        let distinct = strs(&["a", "b", "c", "d"]);
        let score = semantic_entropy_uncertainty(&distinct, &judge).unwrap();
        assert_eq!(score.value, 1.0);
    }

    #[test]
    fn semantic_entropy_two_even_clusters() {
        let judge = NormalizedExactJudge;
        let samples = strs(&["x", "y", "x", "y"]);
        let score = semantic_entropy_uncertainty(&samples, &judge).unwrap();
        // clusters {2,2}: H = ln 2, normalized by ln 4 -> 1/2
        assert!((score.value - 0.5).abs() < 1e-12);
        assert_eq!(
            score.evidence,
            UncertaintyEvidence::ClusterSizes { sizes: vec![2, 2] }
        );
    }

    #[test]
    fn semantic_entropy_needs_two_samples() {
        let judge = NormalizedExactJudge;
        assert!(matches!(
            semantic_entropy_uncertainty(&strs(&["only"]), &judge),
            Err(UncertaintyError::TooFewSamples { got: 1 })
        ));
    }

    #[test]
    fn jaccard_judge_reflexive_and_thresholded() {
        let judge = TokenJaccardJudge::new(0.5).unwrap();
        assert!(judge
            .equivalent("the tall tower", "the tall tower")
            .unwrap());
        assert!(judge
            .equivalent("eiffel tower", "the eiffel tower")
            .unwrap());
        assert!(!judge.equivalent("eiffel tower", "big ben").unwrap());
        assert!(TokenJaccardJudge::new(0.0).is_err());
        assert!(TokenJaccardJudge::new(1.2).is_err());
    }

    #[test]
    fn registry_rejects_duplicates_and_bad_ranges() {
        let mut registry = EstimatorRegistry::new();
        let constant = |v: f64| -> Arc<dyn UncertaintyEstimator> {
            Arc::new(
                move |_: &EstimatorInput<'_>| -> Result<UncertaintyScore, UncertaintyError> {
                    Ok(UncertaintyScore {
                        value: v,
                        method: UncertaintyMethod::External,
                        evidence: UncertaintyEvidence::External {
                            detail: "constant".into(),
                        },
                    })
                },
            )
        };
        registry.register("constant_half", constant(0.5)).unwrap();
        assert!(matches!(
            registry.register("constant_half", constant(0.5)),
            Err(UncertaintyError::DuplicateEstimator { .. })
        ));
        assert!(registry.register("perplexity", constant(0.5)).is_err());

        registry.register("broken", constant(1.5)).unwrap();
        let example = QaExample {
            id: "e".into(),
            question: "q".into(),
            task: crate::dataset::TaskSpec::Generative {
                gold_aliases: vec!["a".into()],
            },
        };
        let input = EstimatorInput {
            backend_id: "b",
            example: &example,
            answer_text: "a",
            token_logprobs: &[-0.1],
            samples: &[],
        };
        assert!(matches!(
            registry.estimate("broken", &input),
            Err(UncertaintyError::ValueOutOfRange { .. })
        ));
        let score = registry.estimate("constant_half", &input).unwrap();
        assert_eq!(score.value, 0.5);
        assert!(matches!(
            registry.estimate("missing", &input),
            Err(UncertaintyError::UnknownEstimator { .. })
        ));
    }

    #[test]
    fn oracle_estimator_separates_perfectly() {
        let registry = {
            let mut r = EstimatorRegistry::new();
            r.register("oracle", oracle_estimator()).unwrap();
            r
        };
        let example = QaExample {
            id: "e".into(),
            question: "q".into(),
            task: crate::dataset::TaskSpec::Generative {
                gold_aliases: vec!["right".into()],
            },
        };
        let good = EstimatorInput {
            backend_id: "b",
            example: &example,
            answer_text: "right",
            token_logprobs: &[-0.1],
            samples: &[],
        };
        let bad = EstimatorInput {
            backend_id: "b",
            example: &example,
            answer_text: "wrong",
            token_logprobs: &[-0.1],
            samples: &[],
        };
        assert_eq!(registry.estimate("oracle", &good).unwrap().value, 0.0);
        assert_eq!(registry.estimate("oracle", &bad).unwrap().value, 1.0);
    }

    proptest! {
        #[test]
        fn perplexity_in_unit_interval(lps in prop::collection::vec(-30.0f64..=0.0, 1..50)) {
            let score = perplexity_uncertainty(&lps).unwrap();
            prop_assert!(score.value >= 0.0);
            prop_assert!(score.value < 1.0);
        }

        #[test]
        fn perplexity_strictly_monotone(
            lps in prop::collection::vec(-10.0f64..=0.0, 1..20),
            pick in any::<prop::sample::Index>(),
            delta in 0.01f64..5.0,
        ) {
            let base = perplexity_uncertainty(&lps).unwrap().value;
            let mut lowered = lps.clone();
            let i = pick.index(lowered.len());
            lowered[i] -= delta;
            let worse = perplexity_uncertainty(&lowered).unwrap().value;
            prop_assert!(worse > base, "{worse} vs {base}");
        }

        #[test]
        fn semantic_entropy_permutation_invariant(
            labels in prop::collection::vec(0u8..5, 2..12),
            rotation in any::<usize>(),
        ) {
            let judge = NormalizedExactJudge;
            let samples: Vec<String> = labels.iter().map(|l| format!("answer {l}")).collect();
            let mut rotated = samples.clone();
            rotated.rotate_left(rotation % samples.len());
            let a = semantic_entropy_uncertainty(&samples, &judge).unwrap().value;
            let b = semantic_entropy_uncertainty(&rotated, &judge).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cluster_sizes_sum_to_sample_count(labels in prop::collection::vec(0u8..6, 2..16)) {
            let judge = NormalizedExactJudge;
            let samples: Vec<String> = labels.iter().map(|l| format!("answer {l}")).collect();
            let sizes = cluster_samples(&samples, &judge).unwrap();
            prop_assert_eq!(sizes.iter().sum::<usize>(), samples.len());
        }

        #[test]
        fn merging_clusters_never_increases_entropy(
            mut sizes in prop::collection::vec(1usize..6, 2..8),
        ) {
            let before = normalized_cluster_entropy(&sizes);
            let merged = sizes.pop().unwrap();
            sizes[0] += merged;
            let after = normalized_cluster_entropy(&sizes);
            prop_assert!(after <= before + 1e-12, "{after} vs {before}");
        }
    }
}
