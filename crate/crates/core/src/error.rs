//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A required column is absent from the input header.
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    /// A cell failed numeric parsing; `row` is the 1-based file row.
    #[error("row {row}: {msg}")]
    ParseRow { row: usize, msg: String },
    /// No data rows were found.
    #[error("empty input: {0}")]
    EmptyInput(String),
    /// A value is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Structurally invalid input (lengths, counts, tokens in data).
    #[error("invalid input: {0}")]
    Input(String),
    /// Invalid configuration key or value.
    #[error("invalid config: {0}")]
    Config(String),
    /// A numerical operation failed (factorization, non-finite objective).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A rank-deficient system was encountered.
    #[error("rank deficiency: {0}")]
    RankDeficient(String),
    /// A dense desk-scale operation was requested beyond its size limit.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Input(format!("csv: {other:?}")),
        }
    }
}

impl Error {
    /// Numerical error reporting the 1-based order of the leading minor
    /// at which a Cholesky factorization failed.
    pub(crate) fn cholesky(context: &str, leading_minor: usize) -> Self {
        Error::Numerical(format!(
            "{context}: Cholesky factorization failed at leading minor {leading_minor}"
        ))
    }
}
