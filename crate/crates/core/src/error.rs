use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or precondition check failed before any work began.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("gradient ascent produced a non-finite gradient at step {step}")]
    AscentDiverged { step: usize },

    #[error("degenerate partition: {0}")]
    Partition(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("surrogate has no output adaptation; call zscore_adapt first")]
    NotAdapted,

    #[error("task `{0}` has no recorded score extrema")]
    NoExtrema(String),

    #[error("score extrema are equal ({0}); normalization undefined")]
    DegenerateExtrema(f64),

    #[error("assignment size {n} exceeds cap {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised by up-front checks, as opposed to failures
    /// that happen while a computation is running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Parse { .. } | Error::Shape { .. }
        )
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteActivation { .. } => "non_finite_activation",
            Error::Diverged { .. } => "diverged",
            Error::AscentDiverged { .. } => "ascent_diverged",
            Error::Partition(_) => "partition",
            Error::Empty(_) => "empty",
            Error::NotAdapted => "not_adapted",
            Error::NoExtrema(_) => "no_extrema",
            Error::DegenerateExtrema(_) => "degenerate_extrema",
            Error::TooLarge { .. } => "too_large",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
