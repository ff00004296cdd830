//! Shared data generators for the criterion benches.

use uaf_core::hashing::stable_u01;
use uaf_core::metrics::LabeledScore;

/// Deterministic labeled scores without any RNG dependency.
pub fn labeled_scores(n: usize, tag: u64) -> Vec<LabeledScore> {
    (0..n)
        .map(|i| {
            let i_bytes = (i as u64).to_be_bytes();
            let t_bytes = tag.to_be_bytes();
            LabeledScore {
                example_id: format!("e{i}"),
                correct: stable_u01(&[b"bench-c", &t_bytes, &i_bytes]) < 0.6,
                uncertainty: stable_u01(&[b"bench-u", &t_bytes, &i_bytes]),
            }
        })
        .collect()
}

/// Token logprobs in [-6, 0).
pub fn logprobs(n: usize, tag: u64) -> Vec<f64> {
    (0..n)
        .map(|i| -6.0 * stable_u01(&[b"bench-lp", &tag.to_be_bytes(), &(i as u64).to_be_bytes()]))
        .collect()
}
