use std::path::PathBuf;

/// Errors produced anywhere in the extraction lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors disagree on a dimension, or a dimension violates an op's precondition.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// An API was used outside of its contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    SampleSize { needed: usize, got: usize },

    #[error("query budget exhausted: {used} of {budget} queries used")]
    Budget { used: usize, budget: usize },

    #[error("training diverged at step {step} in group {group}{context}")]
    Divergence {
        step: usize,
        group: String,
        /// Free-form location such as " (arm full, seed 3)"; empty when unknown.
        context: String,
    },

    #[error("victim did not reach train L1 {threshold} within {steps} steps (last {last:.4}); loss curve: {curve:?}")]
    VictimTraining {
        threshold: f64,
        steps: usize,
        last: f64,
        curve: Vec<f64>,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Attach run context (arm, seed) to a divergence error; other variants pass through.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Divergence { step, group, .. } => Error::Divergence {
                step,
                group,
                context: format!(" ({ctx})"),
            },
            other => other,
        }
    }
}
