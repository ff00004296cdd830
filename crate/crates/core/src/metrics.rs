//! Accuracy, self-assessment AUROC, combined score, and the cross-model
//! complementarity matrix.
//!
//! AUROC is oriented so the positive class is "hallucination" (an incorrect
//! answer) and the classifier score is the uncertainty value: a model that
//! assigns higher uncertainty to its wrong answers scores above 0.5.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("result list is empty")]
    Empty,
    #[error("uncertainty {value} of example {example_id:?} is outside [0, 1]")]
    InvalidUncertainty { example_id: String, value: f64 },
    #[error(
        "AUROC undefined: results contain {positives} incorrect and {negatives} correct entries"
    )]
    SingleClass { positives: usize, negatives: usize },
    #[error("models disagree on example sets; missing (backend, example) pairs: {missing:?}")]
    MismatchedExamples { missing: Vec<(String, String)> },
}

/// One model response on one example, reduced to what the selector needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub example_id: String,
    pub correct: bool,
    pub uncertainty: f64,
}

/// Per-model validation statistics. `cscore` is exactly
/// `accuracy * sah`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub backend_id: String,
    pub accuracy: f64,
    pub sah: f64,
    pub cscore: f64,
    pub n_examples: usize,
}

fn check_uncertainties(results: &[LabeledScore]) -> Result<(), MetricsError> {
    for r in results {
        if !r.uncertainty.is_finite() || !(0.0..=1.0).contains(&r.uncertainty) {
            return Err(MetricsError::InvalidUncertainty {
                example_id: r.example_id.clone(),
                value: r.uncertainty,
            });
        }
    }
    Ok(())
}

/// Fraction of correct entries.
pub fn accuracy(results: &[LabeledScore]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / results.len() as f64)
}

/// Rank-statistic AUROC: over all (incorrect, correct) pairs, the fraction
/// where the incorrect answer carries the higher uncertainty, ties counting
/// one half. Computed in O(n log n) via Mann-Whitney with averaged tie
/// ranks, which matches direct pair enumeration exactly.
pub fn auroc(results: &[LabeledScore]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_uncertainties(results)?;
    let positives = results.iter().filter(|r| !r.correct).count();
    let negatives = results.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }

    let mut scored: Vec<(f64, bool)> = results
        .iter()
        .map(|r| (r.uncertainty, !r.correct))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("uncertainties are finite"));

    // Sum of averaged ranks over the positive (incorrect) class.
    let n = scored.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for entry in &scored[i..j] {
            if entry.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Compose accuracy, AUROC, and their product for one model.
pub fn profile_model(
    backend_id: &str,
    results: &[LabeledScore],
) -> Result<ModelProfile, MetricsError> {
    let accuracy = accuracy(results)?;
    let sah = auroc(results)?;
    Ok(ModelProfile {
        backend_id: backend_id.to_string(),
        accuracy,
        sah,
        cscore: accuracy * sah,
        n_examples: results.len(),
    })
}

/// Detection threshold for the complementarity report: an incorrect answer
/// counts as a detected hallucination when its uncertainty exceeds 0.5.
/// Used by this report only, never by selection or fusion.
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityCell {
    /// % of examples where the column model is correct and the row model is
    /// not.
    pub accuracy_gain_pct: f64,
    /// % of examples where both models are incorrect, the column model flags
    /// its own error (u > 0.5), and the row model does not (u <= 0.5).
    pub detection_gain_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityMatrix {
    pub backend_ids: Vec<String>,
    /// Row-major; `cells[i][j]` is None on the diagonal.
    pub cells: Vec<Vec<Option<ComplementarityCell>>>,
    pub n_examples: usize,
}

/// Pairwise accuracy and detection gains over a common example set.
pub fn complementarity_matrix(
    per_model: &[(String, Vec<LabeledScore>)],
) -> Result<ComplementarityMatrix, MetricsError> {
    if per_model.is_empty() || per_model[0].1.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (_, results) in per_model {
        check_uncertainties(results)?;
    }

    // Align by example id and verify every model covers the same set.
    let mut by_model: Vec<BTreeMap<&str, &LabeledScore>> = Vec::new();
    let mut all_ids: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for (_, results) in per_model {
        let map: BTreeMap<&str, &LabeledScore> =
            results.iter().map(|r| (r.example_id.as_str(), r)).collect();
        all_ids.extend(map.keys().copied());
        by_model.push(map);
    }
    let mut missing = Vec::new();
    for ((backend_id, _), map) in per_model.iter().zip(&by_model) {
        for id in &all_ids {
            if !map.contains_key(id) {
                missing.push((backend_id.clone(), id.to_string()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(MetricsError::MismatchedExamples { missing });
    }

    let n = all_ids.len() as f64;
    let m = per_model.len();
    let mut cells = vec![vec![None; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut acc_gain = 0usize;
            let mut det_gain = 0usize;
            for id in &all_ids {
                let ri = by_model[i][id];
                let rj = by_model[j][id];
                if rj.correct && !ri.correct {
                    acc_gain += 1;
                }
                if !ri.correct
                    && !rj.correct
                    && rj.uncertainty > DETECTION_THRESHOLD
                    && ri.uncertainty <= DETECTION_THRESHOLD
                {
                    det_gain += 1;
                }
            }
            cells[i][j] = Some(ComplementarityCell {
                accuracy_gain_pct: acc_gain as f64 * 100.0 / n,
                detection_gain_pct: det_gain as f64 * 100.0 / n,
            });
        }
    }
    Ok(ComplementarityMatrix {
        backend_ids: per_model.iter().map(|(id, _)| id.clone()).collect(),
        cells,
        n_examples: all_ids.len(),
    })
}

/// O(n^2) pair-counting AUROC, kept as an independent oracle for the rank
/// formulation. Test support; not used by the pipeline.
pub fn auroc_bruteforce(results: &[LabeledScore]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_uncertainties(results)?;
    let incorrect: Vec<f64> = results
        .iter()
        .filter(|r| !r.correct)
        .map(|r| r.uncertainty)
        .collect();
    let correct: Vec<f64> = results
        .iter()
        .filter(|r| r.correct)
        .map(|r| r.uncertainty)
        .collect();
    if incorrect.is_empty() || correct.is_empty() {
        return Err(MetricsError::SingleClass {
            positives: incorrect.len(),
            negatives: correct.len(),
        });
    }
    let mut wins = 0.0f64;
    for &u_inc in &incorrect {
        for &u_cor in &correct {
            if u_inc > u_cor {
                wins += 1.0;
            } else if u_inc == u_cor {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (incorrect.len() as f64 * correct.len() as f64))
}
