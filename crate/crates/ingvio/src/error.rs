use std::path::PathBuf;

/// Failures of the harness, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Dataset { path: PathBuf, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] ingvio_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dataset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Dataset { path: path.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// 2 configuration, 3 dataset, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use ingvio_core::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Dataset { .. } | Self::Parse { .. } => 3,
            // unreadable inputs and unwritable outputs alike
            Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::InvalidConfig(_) => 2,
                E::Unsorted(_) | E::TimeOutOfRange { .. } => 3,
                _ => 4,
            },
        }
    }
}
