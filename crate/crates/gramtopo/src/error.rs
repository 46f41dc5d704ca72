//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    // --- annotation / augmentation ---
    #[error("invalid annotation in sentence {id}: {reason}")]
    InvalidAnnotation { id: String, reason: String },
    #[error("affix {affix:?} not found at expected position in word {word:?} (sentence {id})")]
    AffixNotFound { id: String, word: String, affix: String },
    #[error("lexicon list {0} is empty")]
    EmptyLexicon(&'static str),
    #[error("invalid paradigm table: {0}")]
    InvalidParadigm(String),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),

    // --- tokenizer ---
    #[error("vocab target size {target} is below the minimum {required} (specials + alphabet)")]
    TargetTooSmall { target: usize, required: usize },

    // --- model ---
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    // --- scoring ---
    #[error("no scores to aggregate")]
    EmptyScores,
    #[error("empty evaluation sample")]
    EmptySample,

    // --- tda ---
    #[error("cap {cap} is smaller than the maximum edge value {max_edge}")]
    CapTooSmall { cap: f64, max_edge: f64 },
    #[error("diagrams have different homology dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("point cloud is empty after token filtering")]
    EmptyCloud,

    // --- probe ---
    #[error("affix {affix:?} is not aligned with token boundaries in word {word:?}")]
    AffixNotAligned { word: String, affix: String },
    #[error("no probe records to summarize")]
    EmptyRecords,

    // --- harness ---
    #[error("stage {stage}: missing output {path}")]
    MissingStageOutput { stage: String, path: PathBuf },
    #[error("artifact {path} does not match its recorded hash (expected {expected}, found {actual})")]
    HashMismatch { path: PathBuf, expected: String, actual: String },
    #[error("stage {stage} failed on {path}: {source}")]
    Stage { stage: String, path: PathBuf, #[source] source: Box<Error> },
    #[error("invalid experiment config: {0}")]
    InvalidExperimentConfig(String),

    // --- io / formats ---
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
    #[error("malformed {what} at {path}: {reason}")]
    Format { what: &'static str, path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
