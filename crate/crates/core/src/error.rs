use std::path::PathBuf;

/// Errors produced anywhere in the engine, analysis, or harness layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    IndivisibleHeads { d_model: usize, n_heads: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("position {position} is outside the rotary table (pretrain length {limit})")]
    PositionOutOfRange { position: usize, limit: usize },

    #[error("sequence of {len} tokens exceeds pretrain length {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("token {token} is outside the vocabulary (size {vocab})")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("empty chunk")]
    EmptyChunk,

    #[error("empty input")]
    EmptyInput,

    #[error("selection budget k = {0} is below the two mandatory chunks")]
    BudgetTooSmall(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("token index {got} is not the next index {expected}")]
    NonMonotonic { expected: usize, got: usize },

    #[error("remapped span of {needed} positions exceeds pretrain length {limit}")]
    CapacityExceeded { needed: usize, limit: usize },

    #[error("unknown chunk {chunk} (only {sealed} sealed)")]
    UnknownChunk { chunk: usize, sealed: usize },

    #[error("residency budget {budget} tokens cannot hold one working set of {working_set} tokens")]
    BudgetBelowWorkingSet { budget: usize, working_set: usize },

    #[error("missing reference selection for {0}")]
    MissingReference(String),

    #[error("trace record is missing candidate scores")]
    MissingScores,

    #[error("metric needs at least one nonzero count")]
    AllZeroCounts,

    #[error("{0}")]
    Precondition(String),

    #[error("unknown policy tag `{0}`")]
    UnknownPolicy(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user configuration rather than a failed check.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::IndivisibleHeads { .. }
                | Error::UnknownPolicy(_)
                | Error::Json { .. }
                | Error::Io { .. }
                | Error::BudgetTooSmall(_)
                | Error::BudgetBelowWorkingSet { .. }
                | Error::Precondition(_)
                | Error::TokenOutOfVocab { .. }
                | Error::EmptyInput
        )
    }
}
