//! Greedy top-K model selection and per-example answer fusion.
//!
//! Selection ranks models by `cscore = accuracy * sah` measured on the
//! validation split (ties: higher accuracy, then backend id). Fusion scores
//! each selected model's answer with the configured criterion (the default
//! multiplies frozen validation accuracy by `1 - uncertainty`) and emits
//! the argmax, ties breaking to the lower candidate index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{CachingBackend, ModelBackend};
use crate::dataset::{score_correctness, DatasetError, DatasetSplit, QaExample};
use crate::eval::{EvalError, Evaluator, ModelAnswer};
use crate::metrics::{self, LabeledScore, MetricsError, ModelProfile};
use crate::uncertainty::{AnswerJudge, UncertaintyError};

/// Floor for the ratio criterion denominator, preventing division by zero at
/// u = 0.
pub const RATIO_EPSILON: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("ensemble size k must lie in [1, {n}], got {k}")]
    KOutOfRange { k: usize, n: usize },
    #[error(
        "every profile is degenerate (single-class validation results); ranking is meaningless"
    )]
    AllProfilesDegenerate,
    #[error("no fusion candidates")]
    EmptyCandidates,
    #[error("{candidates} candidates but {accuracies} accuracies")]
    MisalignedAccuracies {
        candidates: usize,
        accuracies: usize,
    },
    #[error("candidate uncertainty {value} is outside [0, 1]")]
    InvalidUncertainty { value: f64 },
    #[error("test split is empty; nothing to fuse")]
    EmptyTestSet,
}

/// A model profile plus whether its SAH had to be imputed because the
/// validation results were single-class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProfile {
    pub profile: ModelProfile,
    pub degenerate_sah: bool,
}

/// Profile a model from its validation answers. A model with perfect or
/// zero validation accuracy has no second class to rank against, so its SAH
/// is imputed as an uninformative 0.5 and flagged.
pub fn profile_from_answers(
    backend_id: &str,
    answers: &[ModelAnswer],
) -> Result<CandidateProfile, EnsembleError> {
    let labeled: Vec<LabeledScore> = answers
        .iter()
        .map(|a| LabeledScore {
            example_id: a.example_id.clone(),
            correct: a.correct,
            uncertainty: a.uncertainty.value,
        })
        .collect();
    match metrics::profile_model(backend_id, &labeled) {
        Ok(profile) => Ok(CandidateProfile {
            profile,
            degenerate_sah: false,
        }),
        Err(MetricsError::SingleClass { .. }) => {
            let accuracy = metrics::accuracy(&labeled)?;
            Ok(CandidateProfile {
                profile: ModelProfile {
                    backend_id: backend_id.to_string(),
                    accuracy,
                    sah: 0.5,
                    cscore: accuracy * 0.5,
                    n_examples: labeled.len(),
                },
                degenerate_sah: true,
            })
        }
        Err(other) => Err(other.into()),
    }
}

/// One row of the selection log, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub backend_id: String,
    pub accuracy: f64,
    pub sah: f64,
    pub cscore: f64,
    pub degenerate_sah: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMember {
    pub backend_id: String,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    /// Chosen members in descending cscore order.
    pub members: Vec<SelectedMember>,
    pub k: usize,
    pub selection_log: Vec<SelectionEntry>,
}

/// Greedily keep the k profiles with the highest cscore. Ties break to the
/// higher accuracy, then to the lexicographically smaller backend id.
pub fn select_top_k(
    profiles: &[CandidateProfile],
    k: usize,
) -> Result<EnsembleSelection, EnsembleError> {
    let n = profiles.len();
    if k == 0 || k > n {
        return Err(EnsembleError::KOutOfRange { k, n });
    }
    // With k == n the selection is forced and no ranking decision is made,
    // so an all-degenerate pool is only an error when pruning is required.
    if k < n && profiles.iter().all(|p| p.degenerate_sah) {
        return Err(EnsembleError::AllProfilesDegenerate);
    }
    let mut ranked: Vec<&CandidateProfile> = profiles.iter().collect();
    ranked.sort_by(|a, b| {
        b.profile
            .cscore
            .partial_cmp(&a.profile.cscore)
            .expect("cscore is finite")
            .then(
                b.profile
                    .accuracy
                    .partial_cmp(&a.profile.accuracy)
                    .expect("accuracy is finite"),
            )
            .then(a.profile.backend_id.cmp(&b.profile.backend_id))
    });
    let selection_log: Vec<SelectionEntry> = ranked
        .iter()
        .enumerate()
        .map(|(rank, c)| SelectionEntry {
            backend_id: c.profile.backend_id.clone(),
            accuracy: c.profile.accuracy,
            sah: c.profile.sah,
            cscore: c.profile.cscore,
            degenerate_sah: c.degenerate_sah,
            selected: rank < k,
        })
        .collect();
    let members = ranked[..k]
        .iter()
        .map(|c| SelectedMember {
            backend_id: c.profile.backend_id.clone(),
            validation_accuracy: c.profile.accuracy,
        })
        .collect();
    Ok(EnsembleSelection {
        members,
        k,
        selection_log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionCriterion {
    /// `accuracy * (1 - uncertainty)`, the combined criterion.
    UafProduct,
    /// Validation accuracy alone; collapses to the single best model.
    AccuracyOnly,
    /// `1 - uncertainty` alone; elevates the most confident model.
    ConfidenceOnly,
    /// `accuracy / max(uncertainty, 1e-9)`.
    Ratio,
    /// Plurality over judge-equivalent answer groups.
    MajorityVote,
}

impl FusionCriterion {
    pub const ALL: [FusionCriterion; 5] = [
        FusionCriterion::UafProduct,
        FusionCriterion::AccuracyOnly,
        FusionCriterion::ConfidenceOnly,
        FusionCriterion::Ratio,
        FusionCriterion::MajorityVote,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionCriterion::UafProduct => "uaf_product",
            FusionCriterion::AccuracyOnly => "accuracy_only",
            FusionCriterion::ConfidenceOnly => "confidence_only",
            FusionCriterion::Ratio => "ratio",
            FusionCriterion::MajorityVote => "majority_vote",
        }
    }
}

/// One model's entry into a fusion round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionCandidate {
    pub backend_id: String,
    pub answer: String,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDecision {
    pub backend_id: String,
    pub answer: String,
    pub uncertainty: f64,
    pub criterion_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDecision {
    pub example_id: String,
    pub candidates: Vec<CandidateDecision>,
    pub winner_index: usize,
    pub final_answer: String,
    pub criterion: FusionCriterion,
}

/// Pick the winning candidate under a criterion. `accuracies` are the
/// members' frozen validation accuracies, positionally aligned with
/// `candidates`.
pub fn fuse(
    example_id: &str,
    candidates: &[FusionCandidate],
    accuracies: &[f64],
    criterion: FusionCriterion,
    judge: &dyn AnswerJudge,
) -> Result<FusionDecision, EnsembleError> {
    if candidates.is_empty() {
        return Err(EnsembleError::EmptyCandidates);
    }
    if candidates.len() != accuracies.len() {
        return Err(EnsembleError::MisalignedAccuracies {
            candidates: candidates.len(),
            accuracies: accuracies.len(),
        });
    }
    for c in candidates {
        if !c.uncertainty.is_finite() || !(0.0..=1.0).contains(&c.uncertainty) {
            return Err(EnsembleError::InvalidUncertainty {
                value: c.uncertainty,
            });
        }
    }

    let values: Vec<f64> = match criterion {
        FusionCriterion::UafProduct => candidates
            .iter()
            .zip(accuracies)
            .map(|(c, acc)| acc * (1.0 - c.uncertainty))
            .collect(),
        FusionCriterion::AccuracyOnly => accuracies.to_vec(),
        FusionCriterion::ConfidenceOnly => candidates.iter().map(|c| 1.0 - c.uncertainty).collect(),
        FusionCriterion::Ratio => candidates
            .iter()
            .zip(accuracies)
            .map(|(c, acc)| acc / c.uncertainty.max(RATIO_EPSILON))
            .collect(),
        FusionCriterion::MajorityVote => {
            // Group judge-equivalent answers (first-fit on the earliest
            // member of each group); a candidate's value is its group size.
            let mut group_of: Vec<usize> = Vec::with_capacity(candidates.len());
            let mut representatives: Vec<&str> = Vec::new();
            let mut sizes: Vec<usize> = Vec::new();
            'next: for c in candidates {
                for (g, rep) in representatives.iter().enumerate() {
                    if judge.equivalent(&c.answer, rep)? {
                        group_of.push(g);
                        sizes[g] += 1;
                        continue 'next;
                    }
                }
                group_of.push(representatives.len());
                representatives.push(&c.answer);
                sizes.push(1);
            }
            group_of.iter().map(|&g| sizes[g] as f64).collect()
        }
    };

    let winner_index = crate::backend::argmax_lowest(&values);
    let decided: Vec<CandidateDecision> = candidates
        .iter()
        .zip(&values)
        .map(|(c, &v)| CandidateDecision {
            backend_id: c.backend_id.clone(),
            answer: c.answer.clone(),
            uncertainty: c.uncertainty,
            criterion_value: v,
        })
        .collect();
    Ok(FusionDecision {
        example_id: example_id.to_string(),
        final_answer: decided[winner_index].answer.clone(),
        candidates: decided,
        winner_index,
        criterion,
    })
}

/// Raw material for fusion and reports: every pool member evaluated on both
/// sides of the split, plus validation profiles. Maps are keyed by backend
/// id; answer vectors follow example order.
pub struct PoolEvaluation {
    pub backend_ids: Vec<String>,
    pub profiles: Vec<CandidateProfile>,
    pub validation_answers: BTreeMap<String, Vec<ModelAnswer>>,
    pub test_answers: BTreeMap<String, Vec<ModelAnswer>>,
}

/// Query every backend over both splits. Each model is queried exactly once
/// per example; selection and fusion afterwards are pure recomputation.
pub fn evaluate_pool(
    evaluator: &Evaluator<'_>,
    backends: &[CachingBackend],
    split: &DatasetSplit,
) -> Result<PoolEvaluation, EnsembleError> {
    let mut backend_ids = Vec::with_capacity(backends.len());
    let mut profiles = Vec::with_capacity(backends.len());
    let mut validation_answers = BTreeMap::new();
    let mut test_answers = BTreeMap::new();
    for backend in backends {
        let id = backend.backend_id().to_string();
        let val = evaluator.evaluate(backend, &split.validation)?;
        profiles.push(profile_from_answers(&id, &val)?);
        let test = evaluator.evaluate(backend, &split.test)?;
        validation_answers.insert(id.clone(), val);
        test_answers.insert(id.clone(), test);
        backend_ids.push(id);
    }
    Ok(PoolEvaluation {
        backend_ids,
        profiles,
        validation_answers,
        test_answers,
    })
}

/// Fuse a selection over per-example answers and score the fused output.
/// Returns the decisions and the ensemble accuracy.
pub fn fuse_examples(
    selection: &EnsembleSelection,
    answers_by_backend: &BTreeMap<String, Vec<ModelAnswer>>,
    examples: &[QaExample],
    criterion: FusionCriterion,
    judge: &dyn AnswerJudge,
) -> Result<(Vec<FusionDecision>, f64), EnsembleError> {
    if examples.is_empty() {
        return Err(EnsembleError::EmptyTestSet);
    }
    let accuracies: Vec<f64> = selection
        .members
        .iter()
        .map(|m| m.validation_accuracy)
        .collect();
    let mut decisions = Vec::with_capacity(examples.len());
    let mut correct = 0usize;
    for (i, example) in examples.iter().enumerate() {
        let candidates: Vec<FusionCandidate> = selection
            .members
            .iter()
            .map(|m| {
                let answer = &answers_by_backend[&m.backend_id][i];
                FusionCandidate {
                    backend_id: m.backend_id.clone(),
                    answer: answer.answer.clone(),
                    uncertainty: answer.uncertainty.value,
                }
            })
            .collect();
        let decision = fuse(&example.id, &candidates, &accuracies, criterion, judge)?;
        if score_correctness(example, &decision.final_answer)? {
            correct += 1;
        }
        decisions.push(decision);
    }
    Ok((decisions, correct as f64 / examples.len() as f64))
}

/// Selection plus fusion results for one K over a fixed pool evaluation.
pub struct FusionOutcome {
    pub selection: EnsembleSelection,
    pub decisions: Vec<FusionDecision>,
    pub ensemble_accuracy: f64,
    /// Accuracy of every fusion criterion over the identical responses.
    pub criterion_accuracies: BTreeMap<String, f64>,
}

/// Everything a run produces before report formatting.
pub struct UafRunArtifacts {
    pub evaluation: PoolEvaluation,
    pub outcome: FusionOutcome,
}

/// The pure tail of a run: select the top k, fuse the test split, and score
/// every fusion criterion on the same responses. Reusable across K values
/// without any new backend queries.
pub fn fuse_pool(
    evaluation: &PoolEvaluation,
    split: &DatasetSplit,
    k: usize,
    criterion: FusionCriterion,
    judge: &dyn AnswerJudge,
) -> Result<FusionOutcome, EnsembleError> {
    let selection = select_top_k(&evaluation.profiles, k)?;
    let (decisions, ensemble_accuracy) = fuse_examples(
        &selection,
        &evaluation.test_answers,
        &split.test,
        criterion,
        judge,
    )?;
    let mut criterion_accuracies = BTreeMap::new();
    for rival in FusionCriterion::ALL {
        let accuracy = if rival == criterion {
            ensemble_accuracy
        } else {
            fuse_examples(
                &selection,
                &evaluation.test_answers,
                &split.test,
                rival,
                judge,
            )?
            .1
        };
        criterion_accuracies.insert(rival.name().to_string(), accuracy);
    }
    Ok(FusionOutcome {
        selection,
        decisions,
        ensemble_accuracy,
        criterion_accuracies,
    })
}

/// End-to-end: profile the pool on the validation split, select the top k,
/// evaluate the test split, and fuse.
pub fn run_uaf(
    evaluator: &Evaluator<'_>,
    backends: &[CachingBackend],
    split: &DatasetSplit,
    k: usize,
    criterion: FusionCriterion,
) -> Result<UafRunArtifacts, EnsembleError> {
    let evaluation = evaluate_pool(evaluator, backends, split)?;
    let outcome = fuse_pool(&evaluation, split, k, criterion, evaluator.judge)?;
    Ok(UafRunArtifacts {
        evaluation,
        outcome,
    })
}
