use std::path::PathBuf;

/// Errors raised by the file formats and command runner.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        offset: usize,
        message: String,
    },
    #[error("{path}: unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u64,
        supported: u64,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("no checkpoints found in {}", dir.display())]
    MissingCheckpoints { dir: PathBuf },
    #[error("{path} already exists; checkpoints and runs are never overwritten")]
    AlreadyExists { path: PathBuf },
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error(transparent)]
    Core(#[from] opposd_core::Error),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> LabError {
        LabError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } => 2,
            LabError::GradcheckFailed(_) => 3,
            LabError::Core(e) if e.is_numeric() => 3,
            LabError::Core(e) if is_config(e) => 2,
            _ => 1,
        }
    }
}

fn is_config(e: &opposd_core::Error) -> bool {
    match e {
        opposd_core::Error::InvalidConfig { .. } => true,
        opposd_core::Error::Stage { source, .. } => is_config(source),
        _ => false,
    }
}
