use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("out-of-bounds extent for tensor `{name}`: {detail}")]
    OutOfBounds { name: String, detail: String },

    #[error("overlapping extents between `{0}` and `{1}`")]
    Overlap(String, String),

    #[error("unknown dtype `{dtype}` for tensor `{name}`")]
    UnknownDtype { name: String, dtype: String },

    #[error("format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("no languages")]
    NoLanguages,

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
