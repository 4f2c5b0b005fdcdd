use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 4],
        rhs: [usize; 4],
    },
    #[error("channel range {start}..{} out of bounds for {channels} channels", start + len)]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
