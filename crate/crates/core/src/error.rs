use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// Every variant maps to the module that raised it (see [`Error::module`]) so
/// the command line can name the failing stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // tensor
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    // encoders
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("image size {got:?} does not match encoder input {expected:?}")]
    ImageSize {
        got: (usize, usize),
        expected: (usize, usize),
    },

    // attention
    #[error("attention: {0}")]
    Attention(String),
    #[error("token span {start}..{end} out of range for {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    // unet
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("invalid unet config: {0}")]
    UNetConfig(String),

    // sampler
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("step index {index} out of range for {num_steps} steps")]
    StepOutOfRange { index: usize, num_steps: usize },

    // mask
    #[error("mask: {0}")]
    Mask(String),
    #[error("attention map has zero range (constant {value}); capture is likely broken")]
    ConstantMap { value: f32 },

    // pipeline
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("mask derivation failed after pass 1: {source}")]
    MaskDerivation {
        #[source]
        source: Box<Error>,
        /// Decoded pass-1 image kept for diagnosis.
        pass1_image: Box<crate::tensor::Tensor>,
    },

    // trainer
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("training: {0}")]
    Training(String),

    // eval
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("eval: {0}")]
    Eval(String),

    // io
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    /// Name of the module that raised the error.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            ShapeMismatch { .. } | InvalidShape { .. } | InvalidAxis { .. } | NonFinite { .. } => {
                "tensor"
            }
            EmptyPrompt | ImageSize { .. } => "encoders",
            Attention(_) | SpanOutOfRange { .. } => "attention",
            MissingWeight(_) | UnknownLayer(_) | UNetConfig(_) => "unet",
            ZeroSteps | StepOutOfRange { .. } => "sampler",
            Mask(_) | ConstantMap { .. } => "mask",
            Config(_) | MaskDerivation { .. } => "pipeline",
            NonFiniteLoss { .. } | Training(_) => "trainer",
            ZeroNorm | Eval(_) => "eval",
            BadMagic(_) | Version { .. } | Crc { .. } | Truncated { .. } | Malformed(_)
            | ConfigParse { .. } | Io { .. } | Image(_) => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
