use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate affine transform (|det| = {det:e})")]
    DegenerateTransform { det: f64 },

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(&'static str),

    #[error("frame lacks descriptors (or descriptor dimensions differ)")]
    MissingDescriptors,

    #[error("affine fit failed: {0}")]
    FitFailure(&'static str),

    #[error("scale {sigma} is outside the representable octave range")]
    ScaleOutOfRange { sigma: f64 },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("location ({gx}, {gy}) outside {width}x{height} grid")]
    LocationOutOfGrid { gx: u32, gy: u32, width: u32, height: u32 },

    #[error("inter residual out of range: {0}")]
    ResidualOutOfRange(String),

    #[error("corrupt stream at bit {bit_offset} (byte {}): {reason}", bit_offset / 8)]
    CorruptStream { bit_offset: u64, reason: String },

    #[error("arithmetic-coded segment of {bits} bits exceeds the 16-bit length field")]
    SegmentTooLong { bits: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("frame {frame_index}: {source}")]
    Frame {
        frame_index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn corrupt(bit_offset: u64, reason: impl Into<String>) -> Self {
        Error::CorruptStream {
            bit_offset,
            reason: reason.into(),
        }
    }

    pub fn at_frame(self, frame_index: u64) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            other => Error::Frame {
                frame_index,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping any frame wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::Frame { source, .. } => source.root(),
            other => other,
        }
    }
}
