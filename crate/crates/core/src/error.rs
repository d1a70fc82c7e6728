use thiserror::Error;

use crate::problem::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bag: {0}")]
    InvalidBag(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid problem: {}", format_diagnostics(.0))]
    InvalidProblem(Vec<Diagnostic>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing targets: {0}")]
    MissingTargets(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_diagnostics(diagnostics: &[Diagnostic]) -> String {
    diagnostics
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
