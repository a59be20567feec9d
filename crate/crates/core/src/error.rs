use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A box collapsed to zero (or negative) area.
    #[error("empty box: {0}")]
    EmptyBox(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("model is empty: {0}")]
    ModelEmpty(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    /// A binary or JSON reader rejected its input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("missing input files for image ids: {}", .0.join(", "))]
    Ingestion(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::EmptyBox(_) => "empty_box",
            Error::Corruption(_) => "corruption",
            Error::Policy(_) => "policy",
            Error::Precondition(_) => "precondition",
            Error::ModelEmpty(_) => "model_empty",
            Error::Schedule(_) => "schedule",
            Error::NonFinite(_) => "non_finite",
            Error::Parse { .. } => "parse",
            Error::Ingestion(_) => "ingestion",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
