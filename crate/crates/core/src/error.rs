//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("vocabulary error: token id {id} is outside a vocabulary of {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("cannot mine hard negatives from a batch of {0} pairs (need at least 2)")]
    TooFewPairs(usize),

    #[error("batch-shape error: {0}")]
    BatchShape(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("dataset error in record {record}: {message}")]
    Dataset { record: String, message: String },

    #[error("checkpoint error in tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("freeze-policy violation: frozen tensor `{0}` changed during training")]
    FreezeViolation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dataset(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dataset {
            record: record.into(),
            message: message.into(),
        }
    }

    pub(crate) fn checkpoint(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            tensor: tensor.into(),
            message: message.into(),
        }
    }

    /// Short category name, used by the command line to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) | Error::BatchShape(_) => "shape",
            Error::Vocabulary { .. } | Error::Input(_) | Error::Usage(_) => "input",
            Error::TooFewPairs(_) => "input",
            Error::Generation(_) => "generation",
            Error::Dataset { .. } => "dataset",
            Error::Checkpoint { .. } => "checkpoint",
            Error::NonFiniteGradient(_) | Error::FreezeViolation(_) => "training",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "shape" | "input" => 3,
            "generation" | "dataset" => 4,
            "checkpoint" => 5,
            "training" => 6,
            _ => 7,
        }
    }
}
