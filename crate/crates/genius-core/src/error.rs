//! Error types shared across the crate.

use thiserror::Error;

/// A per-row problem found while ingesting or validating a table.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    /// Zero-based data row index (not counting the header).
    pub row: usize,
    /// Column name as declared in the schema.
    pub column: String,
    /// What was wrong with the cell.
    pub problem: String,
}

impl std::fmt::Display for RowIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {}, column '{}': {}", self.row, self.column, self.problem)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Input data or configuration fails a precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Cell-level validation problems, reported per row.
    #[error("invalid cells: {}", format_issues(.0))]
    InvalidCells(Vec<RowIssue>),

    /// The identifying condition for an estimator is (numerically) violated.
    #[error("identification error: {0}")]
    Identification(String),

    /// An iterative fit or root search failed to converge.
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// Rank deficiency or other linear-algebra failure.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

fn format_issues(issues: &[RowIssue]) -> String {
    let shown: Vec<String> = issues.iter().take(5).map(|i| i.to_string()).collect();
    let mut s = shown.join("; ");
    if issues.len() > 5 {
        s.push_str(&format!("; ... ({} issues total)", issues.len()));
    }
    s
}
