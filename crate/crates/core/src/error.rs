use alloc::string::String;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch at node {node} ({op}): {detail}")]
    DimensionMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("graph output (node {node}) is {rows}x{cols}, expected a scalar")]
    NonScalarOutput { node: usize, rows: usize, cols: usize },
    #[error("graph has no output node")]
    NoOutput,
    #[error("`{0}` is not an input of the graph")]
    UnknownInput(String),
    #[error("missing value for graph input `{0}`")]
    MissingInput(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("degenerate pooled feature: the pooled vector f0 is zero")]
    DegeneratePooledFeature,
    #[error(
        "no crop reached mean attention {threshold} after {tries} tries; reduce min_attention"
    )]
    CropNotFound { threshold: f64, tries: usize },
    #[error("{what} is not unit-normalized (norm {norm})")]
    NotNormalized { what: &'static str, norm: f64 },
    #[error("no valid cells")]
    NoValidCells,
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("keypoint {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    KeypointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    #[error("{which} marginal sums to {sum}, expected 1")]
    MarginalNotNormalized { which: &'static str, sum: f64 },
    #[error("negative score {value} at ({row}, {col})")]
    NegativeScore { row: usize, col: usize, value: f32 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("synthetic layout does not fit: {0}")]
    LayoutDoesNotFit(String),
}

pub type Result<T> = core::result::Result<T, Error>;
