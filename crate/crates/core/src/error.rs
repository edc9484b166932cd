use thiserror::Error;

/// Formats a shape for error messages: `[1, 8, 32, 32, 32]`.
pub fn shape_str(shape: &[usize]) -> String {
    format!("{:?}", shape)
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {got}")]
    BadRank {
        op: &'static str,
        expected: usize,
        got: String,
    },
    #[error("maxpool3d: spatial dims {dims} must all be even; pad the input before pooling")]
    OddPoolDim { dims: String },
    #[error("backward: loss must be a scalar, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("{op}: data length {len} does not match shape {shape}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: String,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("concat: needs at least one input")]
    EmptyConcat,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("omega = 1 - (lambda + 2*alpha) = {omega} is negative (lambda={lambda}, alpha={alpha}); shrink alpha to at most (1-lambda)/2")]
    NegativeOmega { lambda: f64, alpha: f64, omega: f64 },
    #[error("loss weight {name} = {value} must be >= 0")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("prediction enabled but both global and tumor feature paths are off")]
    NoFeaturePath,
    #[error("tumor features require the segmentation task (t2)")]
    TumorWithoutSeg,
    #[error("tap {tap} requires the segmentation task (t2)")]
    DecoderTapWithoutSeg { tap: String },
    #[error("global features enabled but the tap list is empty")]
    NoTaps,
    #[error("unknown tap id '{got}'; valid taps: {valid}")]
    UnknownTap { got: String, valid: String },
    #[error("input dims {dims} must each be divisible by 16 (4 pooling stages)")]
    DimsNotDivisible { dims: String },
    #[error("base_channels must be >= 1")]
    ZeroWidth,
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: bad magic (not a {expected} file)")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: truncated payload ({need} bytes needed, {have} available)")]
    Truncated {
        path: String,
        need: u64,
        have: u64,
    },
    #[error("{path}: dims {dims} overflow the addressable volume size")]
    DimOverflow { path: String, dims: String },
    #[error("{path}: length checksum mismatch (recorded {recorded}, actual {actual})")]
    BadChecksum {
        path: String,
        recorded: u64,
        actual: u64,
    },
    #[error("{path}: malformed {what}: {detail}")]
    Malformed {
        path: String,
        what: &'static str,
        detail: String,
    },
    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("NaN gradient in parameter '{param}' at step {step}")]
    NanGradient { param: String, step: u64 },
    #[error("training diverged (non-finite loss) at epoch {epoch}; checkpoint of last finite epoch kept")]
    Diverged { epoch: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("AUC undefined: labels contain a single class")]
    SingleClassAuc,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Crate-wide error, for callers that do not care which layer failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Other(String),
}
