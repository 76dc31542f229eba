use thiserror::Error;

use crate::autodiff::GraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("non-finite gradient during latent inference")]
    NonFiniteGradient,
    #[error("missing latent for sequence {0}")]
    MissingLatent(usize),
    #[error("missing style label for supervised input")]
    MissingLabel,
    #[error("corpus and checkpoint disagree: {0}")]
    Mismatch(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("proposition check failed: {0}")]
    PropositionFailed(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Process exit code: 1 config, 2 I/O, 3 divergence, 4 failed
    /// proposition, 5 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Corrupt(_) | Error::SchemaVersion { .. } => 2,
            Error::Divergence { .. } | Error::NonFiniteGradient => 3,
            Error::PropositionFailed(_) => 4,
            Error::MissingArtifact(_) => 5,
            _ => 1,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
