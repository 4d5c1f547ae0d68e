use std::fmt;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} modality has no tokens; use the masked path instead")]
    EmptyModality(Modality),
    #[error("{modality} stack has {depth} layers, layer index {index} is out of range")]
    LayerIndex {
        modality: Modality,
        index: usize,
        depth: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("unknown query id {0:?}")]
    UnknownQuery(String),
    #[error("query {0:?} has no answer string")]
    MissingAnswer(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("size mismatch: header declares {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("non-finite feature value at layer {layer}, row {row}")]
    NonFiniteFeature { layer: usize, row: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Which backbone a set of activations came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    Text,
    Vision,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Vision => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Vision),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("text"),
            Modality::Vision => f.write_str("vision"),
        }
    }
}
