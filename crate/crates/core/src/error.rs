use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("sequence of {len} tokens exceeds context length {max}")]
    Length { len: usize, max: usize },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("layout mismatch at segment `{segment}`")]
    Shape { segment: String },

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("incompatible checkpoint: expected config hash {expected}, found {found}")]
    Incompatible { expected: String, found: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("distilled corpus is empty: {correct} correct of {total} sampled traces")]
    EmptyCorpus { correct: usize, total: usize },

    #[error("missing evaluation for checkpoint `{label}` on split `{split}`")]
    MissingEval { label: String, split: String },

    #[error("branch `{teacher}` in round {round} failed: {source}")]
    Branch {
        round: usize,
        teacher: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
