use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("prompt of {len} tokens exceeds max_seq_len {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("token id {token} is outside the vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("invalid hook site: {0}")]
    InvalidSite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary exhausted: need {need} distinct content tokens, pool has {have}")]
    VocabExhausted { need: usize, have: usize },

    #[error("malformed wordset row {line}: {reason}")]
    Wordset { line: usize, reason: String },

    #[error("degenerate letter string: {0}")]
    DegenerateLetters(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("splits share tokens: {0}")]
    NonDisjointSplits(String),

    #[error("template mismatch: {0}")]
    Template(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
