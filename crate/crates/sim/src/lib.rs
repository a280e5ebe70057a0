//! Desk-scale simulator for the buffer / reinforce / user fine-tuning
//! pipeline on linear least-squares "models".
//!
//! Instead of token-level likelihoods, every task is a least-squares
//! objective `L(W) = 1/(2N) * sum_i ||W x_i - T x_i||^2` over a data
//! matrix `X`. This is a deliberate modeling substitution: gradients,
//! minimizers, and convergence rates all have closed forms, so the
//! saturation phenomenon and the paired defended/undefended comparisons
//! become checkable theorems at millisecond scale rather than empirical
//! observations.
//!
//! The default world geometry is block-disjoint: input coordinates are
//! partitioned into a harmful block, a benign block, and a user block,
//! each task's data is supported on its own block, and each task target
//! offsets the base weights only on its block's columns. Harmful and
//! refusal tasks share the harmful block (same queries, different
//! desired outputs), with the harmful offset pulling opposite to the
//! refusal offset. That makes cross-task interference exactly zero where
//! the pipeline needs it to be, while keeping the harmful/refusal
//! conflict real.

pub mod config;
pub mod pipeline;
pub mod saturation;
pub mod train;
pub mod world;

use std::path::PathBuf;

use softmerge_core::error::ErrorKind;
use softmerge_core::CoreError;

pub use config::SimConfig;
pub use pipeline::{
    run_and_emit, run_no_defense, run_pipeline, FinalLosses, NoDefenseOutcome, NoDefenseReport,
    PipelineOutcome, PipelineReport, SimSummary,
};
pub use saturation::{saturation_experiment, SaturationOutcome, SaturationReport};
pub use train::{train_stage, LowRankFactors, SimAdapter, SimRole, StageResult, StageSpec};
pub use world::{SimWorld, TaskKind, WorldLayer};

/// Errors from configuration, world construction, and training.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    /// Propagated numerical-kernel or archive error.
    #[error(transparent)]
    Core(#[from] CoreError),

    /// Filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        /// Path involved.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// Config file could not be parsed.
    #[error("cannot parse config {path}: {reason}")]
    ConfigParse {
        /// Path involved.
        path: PathBuf,
        /// Parser message.
        reason: String,
    },

    /// A stage's loss increased for ten consecutive steps.
    #[error("stage `{stage}` diverged at step {step} (loss {loss:.6e}); lower the learning rate")]
    Divergence {
        /// Stage name.
        stage: String,
        /// Step index at which the tenth consecutive increase occurred.
        step: usize,
        /// Loss at that step.
        loss: f64,
    },

    /// Precondition violation.
    #[error("invalid {context}: {reason}")]
    Invalid {
        /// What was being validated.
        context: String,
        /// What was wrong.
        reason: String,
    },
}

impl SimError {
    pub(crate) fn invalid(context: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Invalid { context: context.into(), reason: reason.into() }
    }

    /// Coarse classification for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            SimError::Core(e) => e.kind(),
            SimError::Io { .. } => ErrorKind::Io,
            SimError::ConfigParse { .. } | SimError::Divergence { .. } | SimError::Invalid { .. } => {
                ErrorKind::Validation
            }
        }
    }
}
