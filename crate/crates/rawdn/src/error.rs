use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// usage (2), data/format (3), numeric (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("pattern error: {0}")]
    Pattern(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown tensor name: {0}")]
    UnknownTensor(String),

    #[error("shape mismatch for tensor {name}: checkpoint {found:?}, configured {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("degenerate noise parameters: a and b are both zero")]
    DegenerateNoiseParams,

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("singular color kernel: condition number estimate {0:.3e}")]
    Singular(f64),

    #[error("non-finite loss at iteration {iter}, first offending tensor: {tensor}")]
    NonFinite { iter: usize, tensor: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
