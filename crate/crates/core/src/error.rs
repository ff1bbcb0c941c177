use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: {left:?} vs {right:?}")]
    Shape {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("ambiguous guidance: token {token} is amplified by overlapping masks of pairs {first} and {second}")]
    Ambiguous { token: usize, first: usize, second: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("no ratio for ({concept}, {part}) in the table and the planner is unavailable")]
    UnresolvedRatio { concept: String, part: String },

    #[error("trace would need {needed} bytes of attention maps, budget is {budget}")]
    TraceOverflow { needed: usize, budget: usize },

    #[error("missing attention map for step {step}, layer {layer}")]
    MissingMap { step: usize, layer: usize },

    #[error("prompt does not match any template: {0:?}")]
    NoTemplate(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures decoding the binary checkpoint and attention-dump formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error("malformed image: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
