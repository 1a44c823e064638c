use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("join failed: no feature row for {} item(s): {}", missing.len(), missing.join(", "))]
    MissingFeatures { missing: Vec<String> },

    #[error("duplicate feature row for item `{0}`")]
    DuplicateFeature(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("separation detected: coefficient `{predictor}` diverges (|value| = {magnitude:.1})")]
    Separation { predictor: String, magnitude: f64 },

    #[error("design matrix is rank deficient (rank {rank} < {columns} columns)")]
    Rank { rank: usize, columns: usize },

    #[error("IRLS did not converge within {0} iterations")]
    Convergence(usize),

    #[error("degrees of freedom: {0}")]
    DegreesOfFreedom(String),

    #[error("degenerate policy: {0}")]
    DegeneratePolicy(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("bootstrap failed: {failed} of {total} replicates did not fit (last error: {last_error})")]
    Bootstrap {
        failed: usize,
        total: usize,
        last_error: String,
    },

    #[error("balanced selection infeasible; option counts in pool {pool}: {counts:?}")]
    SelectionInfeasible { pool: &'static str, counts: [usize; 4] },

    #[error("no answer-option token found in top logprobs: {dump}")]
    Extraction { dump: String },

    #[error("replay cache miss for request {hash}")]
    CacheMiss { hash: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    /// True for errors caused by bad input rather than by the toolkit itself.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Json(_) | Error::Transport(_) | Error::Convergence(_) | Error::Bootstrap { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
