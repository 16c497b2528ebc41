use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CuratorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CuratorError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("domain {domain:?} has {available} documents, {requested} requested")]
    TooFewDocuments {
        domain: String,
        available: usize,
        requested: usize,
    },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("empty token sequence{}", doc_suffix(.doc))]
    EmptySequence { doc: Option<String> },

    #[error("document {doc:?} has {len} tokens, at least {min} required")]
    TooShort { doc: String, len: usize, min: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite {what} for sample {sample}")]
    NonFinite { sample: String, what: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("threshold {threshold} retains no documents")]
    EmptySelection { threshold: f64 },

    #[error("unknown FLOPs method {0:?}")]
    UnknownMethod(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<CuratorError>,
    },

    #[error("refusing to overwrite {0} (pass --force)")]
    ArtifactExists(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn doc_suffix(doc: &Option<String>) -> String {
    match doc {
        Some(id) => format!(" for document {id:?}"),
        None => String::new(),
    }
}

impl CuratorError {
    pub fn at_step(self, step: u64) -> Self {
        match self {
            e @ CuratorError::AtStep { .. } => e,
            e => CuratorError::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CuratorError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Configuration problems map to exit code 2, everything else to 3.
    pub fn is_config_error(&self) -> bool {
        matches!(self, CuratorError::Config { .. })
    }
}
