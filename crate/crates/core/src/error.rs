use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability {value} in {what}")]
    InvalidProbability { what: &'static str, value: f64 },

    #[error("{what} sums to {sum}, expected 1")]
    NotNormalized { what: &'static str, sum: f64 },

    #[error("dimension mismatch: expected {expected} structures, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("model needs at least one structure")]
    NoStructures,

    #[error("likelihood of structure {index} is 0; construct the model with parse failure allowed")]
    ZeroLikelihood { index: usize },

    #[error("word has zero marginal probability (total parse failure)")]
    TotalParseFailure,

    #[error("{failed} of {trials} trials failed to parse at step {step}; parse failure is not allowed")]
    ParseFailure { step: usize, failed: u64, trials: u64 },

    #[error("probability {mass} of failing to parse at step {step}; parse failure is not allowed")]
    ExactParseFailure { step: usize, mass: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("chain needs {states} states, over the budget of {budget}")]
    StateBudgetExceeded { states: u128, budget: usize },

    #[error("garden-path effect compares step {amb} with step {unamb}")]
    StepMismatch { amb: usize, unamb: usize },

    #[error("need at least 3 finite points to fit, found {found}")]
    TooFewPoints { found: usize },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("line {line}, column `{column}`: {message}")]
    Record { line: u64, column: String, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
