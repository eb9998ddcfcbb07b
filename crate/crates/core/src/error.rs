use thiserror::Error;

#[derive(Debug, Error)]
pub enum MobilabError {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("configuration has no lineages")]
    EmptyConfig,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error at line {line}, column `{column}`: {message}")]
    Validation { line: u64, column: String, message: String },

    #[error("regressor has zero variance; slope is undefined")]
    UndefinedSlope,

    #[error("insufficient data: need at least {needed}, got {got} ({what})")]
    InsufficientData { what: String, needed: usize, got: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("specification error: {0}")]
    Spec(String),

    #[error("missing prerequisite analyses: {}", .0.join(", "))]
    Dependency(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MobilabError {
    pub(crate) fn insufficient(what: impl Into<String>, needed: usize, got: usize) -> Self {
        MobilabError::InsufficientData {
            what: what.into(),
            needed,
            got,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MobilabError::ParameterDomain(_)
            | MobilabError::EmptyConfig
            | MobilabError::Config(_)
            | MobilabError::Spec(_) => 2,
            MobilabError::Validation { .. } | MobilabError::Csv(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T, E = MobilabError> = std::result::Result<T, E>;
