use thiserror::Error;

/// Errors raised by the network layers, parameter store and weight archive.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("input {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleInput { height: usize, width: usize, patch: usize },
    #[error("feature map {height}x{width} is not divisible by window size {window}")]
    IndivisibleFeatureMap { height: usize, width: usize, window: usize },
    #[error("{channels} channels cannot be split across {heads} heads")]
    HeadDivisibility { channels: usize, heads: usize },
    #[error("patch merging needs even dimensions, got {height}x{width}")]
    OddDimensions { height: usize, width: usize },
    #[error("{channels} channels is fewer than the squeeze reduction ratio {reduction}")]
    ChannelTooSmall { channels: usize, reduction: usize },
    #[error("skip {skip:?} cannot be fused with previous decoder output {prev:?}")]
    IncompatibleSkip { prev: Vec<usize>, skip: Vec<usize> },
    #[error("expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),
    #[error("corrupt weight archive: {0}")]
    CorruptArchive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type NnResult<T> = Result<T, NnError>;
