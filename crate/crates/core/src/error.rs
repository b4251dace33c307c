use thiserror::Error;

use crate::task::{SideTaskState, TransitionKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A configuration value that violates a documented invariant.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("illegal transition {kind:?} from state {from:?}")]
    IllegalTransition { from: SideTaskState, kind: TransitionKind },

    #[error("task `{task}` is not runnable: {reason}")]
    NotRunnable { task: String, reason: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("internal simulator error: {0}")]
    Internal(String),
}
