//! Ensemble answer fusion for factoid QA over pools of language-model backends.
//!
//! The pipeline profiles every backend in a pool on a validation split
//! (accuracy plus AUROC of its uncertainty scores at flagging its own wrong
//! answers), greedily selects the top-K by the product of the two, and then
//! answers each test question with the candidate maximizing
//! `accuracy * (1 - uncertainty)`. Backends are either live OpenAI-compatible
//! HTTP endpoints or deterministic simulations, with persistent response
//! caching so experiments are resumable and byte-reproducible.

pub mod backend;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod harness;
pub mod hashing;
pub mod metrics;
pub mod uncertainty;

pub use backend::{
    BackendDescriptor, BackendError, BackendKind, CachingBackend, GenerationRequest,
    GenerationResult, ModelBackend,
};
pub use dataset::{DatasetError, DatasetSplit, QaExample, TaskKind, TaskSpec};
pub use ensemble::{
    EnsembleError, EnsembleSelection, FusionCandidate, FusionCriterion, FusionDecision,
};
pub use eval::{EvalError, ModelAnswer};
pub use metrics::{LabeledScore, MetricsError, ModelProfile};
pub use uncertainty::{EquivalenceJudgeConfig, UncertaintyError, UncertaintyScore};
