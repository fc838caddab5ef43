//! File formats, dataset directories, checkpoints and reports for
//! [`dbsam_core`], plus the `dbsam` command line built on them.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod config_file;
pub mod dataset;
pub mod dbsm;
pub mod report;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    /// A file that is not valid DBSM, CSV or config text.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] dbsam_core::Error),
}

impl Error {
    pub fn at(path: &Path, e: impl Into<Error>) -> Error {
        e.into().in_file(path)
    }

    /// Tags the error with the file it came from.
    pub fn in_file(self, path: &Path) -> Error {
        match self {
            e @ Error::File { .. } => e,
            e => Error::File {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// The error with any file tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
