use std::path::PathBuf;

use crate::runconfig::RunConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] memtrans_core::Error),
    #[error(transparent)]
    RunConfig(#[from] RunConfigError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    /// 2 for configuration and usage problems, 3 for everything that went
    /// wrong while running.
    pub fn exit_code(&self) -> i32 {
        use memtrans_core::Error as C;
        match self {
            Error::RunConfig(_) | Error::Usage(_) => 2,
            Error::Core(C::Config(_) | C::Parse { .. }) => 2,
            _ => 3,
        }
    }
}
