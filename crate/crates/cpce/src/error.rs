//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failure modes of validation, fitting, identification and estimation.
#[derive(Debug, Error)]
pub enum CpceError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("empty cell: {0}")]
    EmptyCell(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("labels are all identical; nothing to fit")]
    DegenerateLabels,
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("overlap violated: {0}")]
    Overlap(String),
    #[error("monotonicity violated: p1 = {p1} < p0 = {p0}")]
    Monotonicity { p1: f64, p0: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CpceError>;
