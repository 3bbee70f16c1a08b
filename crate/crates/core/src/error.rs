use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient reaching {0}")]
    NonFiniteGradient(String),

    #[error("{heads} heads do not divide feature width {features}")]
    HeadsDoNotDivideF { heads: usize, features: usize },

    #[error("input of length {len} is shorter than the encoder kernel {kernel}")]
    InputTooShort { len: usize, kernel: usize },

    #[error("chunk layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("reference signal has zero energy after mean removal")]
    DegenerateReference,

    #[error("{0} sources exceed the exhaustive permutation limit of 6")]
    TooManySources(usize),

    #[error("need at least 10 items to split, got {0}")]
    TooFewItems(usize),

    #[error("non-finite values in batch {batch}: {source}")]
    NonFiniteBatch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported format: {field}: {detail}")]
    UnsupportedFormat { field: &'static str, detail: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CorruptChecksum { stored: u32, computed: u32 },

    #[error("unexpected end of data while reading {0}")]
    UnexpectedEof(&'static str),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("config line {line}: key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteBatch { .. }
        )
    }
}
