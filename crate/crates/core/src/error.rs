use thiserror::Error;

/// Errors raised by the detection, training and evaluation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("degenerate box: width {width} and height {height} must both be positive")]
    DegenerateBox { width: f64, height: f64 },

    #[error("tubelet starting at frame {start} with {len} boxes does not cover frames [{range_start}, {range_end})")]
    RangeNotCovered {
        start: i64,
        len: usize,
        range_start: i64,
        range_end: i64,
    },

    #[error("empty tubelet")]
    EmptyTubelet,

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("extrapolation needs clip length >= 2 and a proposal of at least that length (clip {clip_len}, proposal {proposal_len})")]
    ExtrapolationRange { clip_len: usize, proposal_len: usize },

    #[error("model at step {step} produced no anticipation output")]
    MissingAnticipation { step: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("misaligned detection sets: {0}")]
    Misaligned(String),
}

pub type Result<T, E = StepError> = std::result::Result<T, E>;
