use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("character '{0}' has no pinyin mapping")]
    MissingPinyin(String),
    #[error("'{0}' is both a pinyin syllable and an English word")]
    PinyinCollision(String),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("CTC target of length {target} needs at least {required} frames, got {frames}")]
    InfeasibleTarget { target: usize, required: usize, frames: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("CTC numeric failure: {0}")]
    CtcNumeric(String),
    #[error("masked cross-entropy needs at least one masked position")]
    EmptyMask,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("manifest record {record}: {msg}")]
    Manifest { record: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("total audio duration is zero")]
    ZeroAudio,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
