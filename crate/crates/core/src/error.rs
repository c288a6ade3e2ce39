use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("example `{id}` is missing field `{field}`")]
    MissingField { id: String, field: &'static str },

    #[error("label `{0}` is not part of the verbalizer")]
    UnknownLabel(String),

    #[error("invalid task spec: {0}")]
    InvalidTask(String),

    #[error("classes `{first}` and `{second}` share first label token {token}")]
    CollidingLabels {
        first: String,
        second: String,
        token: u32,
    },

    #[error("no shot count fits the context: 1-shot truncation probability {truncation_probability:.3} exceeds budget {budget:.3}")]
    NoBudget {
        truncation_probability: f64,
        budget: f64,
    },

    #[error("prompt has {tokens} tokens, context limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid backend config: {0}")]
    InvalidConfig(String),

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("unsupported store format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("label-word probability mass is zero")]
    ZeroMass,

    #[error("k = {k} exceeds store size {size}")]
    KTooLarge { k: usize, size: usize },

    #[error("L2 distance requires hidden keys but the store has none")]
    MissingHidden,

    #[error("ensemble plan has no demonstration sets")]
    EmptyPlan,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("degenerate power-law fit: {0}")]
    DegenerateFit(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wrap with a human-readable location such as `seed 3, instance t-17`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any [`Error::Context`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Transport failures are worth retrying; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self.root(), Error::BackendUnavailable(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
