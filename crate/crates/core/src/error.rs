use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown part id {0}")]
    UnknownPart(u32),
    #[error("invalid brick model: {0}")]
    InvalidModel(String),
    #[error("position class {0:?} outside [0, {1}]")]
    InvalidClass([i64; 3], u32),
    #[error("malformed token stream: {0}")]
    MalformedStream(String),
    #[error("no valid ordering exists for model `{0}`")]
    NoValidOrdering(String),
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no masked positions in sequence {0}")]
    EmptyMask(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("token stream of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training diverged at step {0}")]
    TrainingDiverged(usize),
    #[error("no valid candidate for the next step")]
    NoValidCandidate,
    #[error("invalid choice: {0}")]
    InvalidChoice(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
