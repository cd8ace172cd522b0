use std::path::PathBuf;

/// Errors raised anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64, trace: Vec<f64> },

    #[error("no steering candidate satisfied the selection constraints ({} evaluated)", .table.len())]
    SelectionEmpty {
        table: Vec<crate::steering::CandidateScores>,
    },

    #[error("circuit of {requested} edges unattainable; at most {attainable} edges survive pruning")]
    Construction { requested: usize, attainable: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind tag, used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::Divergence { .. } => "divergence",
            Error::SelectionEmpty { .. } => "selection-empty",
            Error::Construction { .. } => "construction",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
