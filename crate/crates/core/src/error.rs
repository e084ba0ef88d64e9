use std::path::PathBuf;

/// Errors surfaced by the pruning pipeline.
///
/// Each variant maps onto one process exit code of the `mjp` binary, see
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed data in {path} at byte {offset}: {reason}")]
    Malformed {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("scene generation failed for seed {seed}: {reason}")]
    Placement { seed: u64, reason: String },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    /// Exit code contract of the CLI: 2 usage, 3 prerequisite, 4 data, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Prerequisite(_) => 3,
            Error::Divergence(_) => 5,
            Error::Precondition(_)
            | Error::Dimension(_)
            | Error::Malformed { .. }
            | Error::Placement { .. }
            | Error::Io { .. }
            | Error::Json { .. } => 4,
        }
    }

    /// Short machine-parsable tag used on the CLI's single error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Prerequisite(_) => "prerequisite",
            Error::Config(_) => "config",
            Error::Precondition(_) => "precondition",
            Error::Dimension(_) => "dimension",
            Error::Malformed { .. } => "malformed",
            Error::Placement { .. } => "placement",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
