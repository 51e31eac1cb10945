use thiserror::Error;

/// Errors raised by the distillation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("position {position} out of range for response of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("policy family mismatch: {0}")]
    FamilyMismatch(String),

    #[error("vocabulary mismatch: student has {student}, teacher has {teacher}")]
    VocabularyMismatch { student: usize, teacher: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("gradient queried on a frozen policy")]
    FrozenPolicy,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("rollout {index} is stale at position {position}: stored log-prob {stored}, current {current}")]
    StaleRollout {
        index: usize,
        position: usize,
        stored: f64,
        current: f64,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("report/candidate mismatch: {0}")]
    ReportMismatch(String),

    #[error("config error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("unknown recipe `{0}`")]
    UnknownRecipe(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error at step {step}: {source}")]
    StepIo {
        step: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("metrics write failed at record {index}: {source}")]
    MetricsIo {
        index: usize,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("protocol version mismatch: client {client}, server {server}")]
    VersionMismatch { client: u32, server: u32 },

    #[error("remote error for request {request_id}: {message}")]
    Remote { request_id: u64, message: String },

    #[error("remote distribution not normalized: mass {mass}")]
    NotNormalized { mass: f64 },

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("numerical abort at step {step}: {message}")]
    NumericalAbort { step: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
