use thiserror::Error;

/// Errors surfaced by the HPFR library.
#[derive(Debug, Error)]
pub enum HpfrError {
    /// A required column is missing or the schema is otherwise unusable.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed; `row` is the 1-based data row (header excluded).
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// Structurally invalid data (duplicate times, inconsistent dimensions, ...).
    #[error("data error: {0}")]
    Data(String),

    /// An evaluation point lies outside the supported domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Linear algebra failed beyond the jitter escalation policy.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A requested posterior/prior moment does not exist.
    #[error("moment error: {0}")]
    Moment(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HpfrError>;
