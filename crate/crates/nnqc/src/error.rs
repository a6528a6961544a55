use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(nnqc_core::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("fingerprint hash {found} does not match checkpoint ({expected}); pass --force to override")]
    FingerprintMismatch { expected: String, found: String },
    #[error("digest mismatch for {0}")]
    Digest(String),
    #[error("{stage} training diverged at step {step}: {detail}")]
    Divergence {
        stage: &'static str,
        step: usize,
        detail: String,
    },
    #[error("band unreachable: {0}")]
    BandUnreachable(nnqc_core::Error),
    #[error("model: {0}")]
    Model(String),
    #[error("format: {0}")]
    Format(String),
}

impl From<nnqc_core::Error> for Error {
    fn from(e: nnqc_core::Error) -> Self {
        match e {
            nnqc_core::Error::BandUnreachable { .. } => Error::BandUnreachable(e),
            e => Error::Core(e),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite(_) | Error::FingerprintMismatch { .. } | Error::Digest(_) => 3,
            Error::Divergence { .. } => 4,
            Error::BandUnreachable(_) => 5,
            _ => 1,
        }
    }
}
