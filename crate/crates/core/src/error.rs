use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid dims {dims:?} for {len} elements")]
    InvalidDims { dims: Vec<usize>, len: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("zero-norm {0}")]
    ZeroNorm(&'static str),

    #[error("bad magic")]
    BadMagic,

    #[error("truncated payload")]
    Truncated,

    #[error("trailing bytes after payload")]
    TrailingBytes,

    #[error("nonzero reserved header bytes")]
    ReservedBytes,

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("extent overflow")]
    ExtentOverflow,

    #[error("malformed quantized tensor: {0}")]
    Malformed(String),

    #[error("hadamard: {0}")]
    Hadamard(String),

    #[error("degenerate fit for {layer}: {reason}")]
    DegenerateFit { layer: String, reason: String },

    #[error("routing threshold undefined for slope {alpha:e}")]
    UndefinedThreshold { alpha: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("missing predictor for block {block} layer {layer}")]
    MissingPredictor { block: usize, layer: String },

    #[error("cannot read predictor file {0}")]
    PredictorFile(String),

    #[error("predictor file line {line}: {msg}")]
    PredictorParse { line: usize, msg: String },

    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },

    #[error("no records")]
    NoRecords,

    #[error("trajectory blow-up at timestep {timestep} (norm ratio {ratio:e})")]
    BlowUp { timestep: usize, ratio: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for command-line use.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::PredictorParse { .. } | Error::TraceParse { .. } | Error::BlowUp { .. } => 2,
            Error::DegenerateFit { .. } => 3,
            Error::MissingPredictor { .. } | Error::PredictorFile(_) => 4,
            Error::NoRecords => 5,
            _ => 1,
        }
    }
}
