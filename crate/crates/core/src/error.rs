use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported encoding: format tag {format}, {bits} bits per sample (need 16-bit PCM)")]
    UnsupportedEncoding { format: u16, bits: u16 },
    #[error("unsupported channel count {0} (need mono)")]
    UnsupportedChannels(u16),
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty audio buffer")]
    EmptyBuffer,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample rate mismatch: {left} vs {right}")]
    RateMismatch { left: u32, right: u32 },
    #[error("zero-power signal; ratio undefined")]
    ZeroPower,
    #[error("constant feature vector; correlation undefined")]
    ZeroVariance,
    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("audio too short: {samples} samples, need at least {needed}")]
    AudioTooShort { samples: usize, needed: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown transition-id {0}")]
    UnknownTransition(u32),
    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),
    #[error("empty word sequence")]
    EmptyCommand,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unsupported model version {0:?}")]
    ModelVersion(String),
    #[error("corrupted model payload: {0}")]
    CorruptedModel(String),

    #[error("empty matrix")]
    EmptyMatrix,
    #[error("empty target")]
    EmptyTarget,
    #[error("offset {offset} + target length {len} exceeds {frames} frames")]
    OffsetOutOfRange { offset: usize, len: usize, frames: usize },
    #[error("song too short: {frames} frames cannot host a {needed}-frame target")]
    SongTooShort { frames: usize, needed: usize },
    #[error("empty sample set")]
    EmptySampleSet,
}

pub type Result<T> = std::result::Result<T, Error>;
