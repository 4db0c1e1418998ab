#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Group-relative policy-gradient estimators on a tabular softmax policy.
//!
//! The policy is a logit table over decoding contexts, so every gradient is
//! exact and can be compared against finite differences. Estimators are
//! expressed as per-token coefficients on score vectors, which makes the
//! shared-prefix behaviour of each family directly measurable.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod policy;
pub mod rollout;
pub mod transforms;

pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, RunRecord, StepRow};
pub use objectives::{EstimatorFamily, EstimatorSpec, WeightStages};
pub use policy::{Context, GradientVector, PolicyParams, PromptId, TokenId, VocabSpec};
pub use rollout::{AdvantageMode, GroupBatch, SamplerConfig, Trajectory, Verifier};
pub use transforms::{TransformKind, TransformSpec};
