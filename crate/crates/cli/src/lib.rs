//! Operator entry points: configuration schema, checkpoint format and the
//! subcommands of the `bevdrive` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

use thiserror::Error;

use bevdrive::autodiff::TrainingError;
use bevdrive::policy::PolicyError;

pub use checkpoint::{Checkpoint, CheckpointKind, Metadata};
pub use config::{AgentKind, EvalSection, RunConfig, RunSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    NonFinite(String),
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("unusable checkpoint: {0}")]
    Checkpoint(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Version { .. } | CliError::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::NonFinite(_)
            | PolicyError::Params(TrainingError::NonFinite(_) | TrainingError::NonFiniteGradient(_)) => {
                CliError::NonFinite(e.to_string())
            }
            PolicyError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<bevdrive::bev::BevError> for CliError {
    fn from(e: bevdrive::bev::BevError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::Policy(p) => p.into(),
            eval::EvalError::Scenario(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<segdecoder::SegError> for CliError {
    fn from(e: segdecoder::SegError) -> Self {
        match e {
            segdecoder::SegError::Config(m) => CliError::Config(m),
            segdecoder::SegError::Io(io) => CliError::Io(io),
            other => CliError::Other(other.to_string()),
        }
    }
}
