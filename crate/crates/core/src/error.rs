use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape rules violated by an operation. Names the op and both shapes.
    #[error("{op}: dimension mismatch: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Bad argument values: out-of-range rates, empty groups, unknown labels.
    #[error("{0}")]
    Validation(String),

    /// An API was driven outside its contract (backward on a cleared tape,
    /// optimizer step without gradients, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed checkpoint or dataset bytes.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A recording is too short to fill a sample window.
    #[error(
        "recording {id}: not enough frames after motion start: \
         face {face_have}/{face_need}, depth {depth_have}/{depth_need}, \
         motion {motion_have}/{motion_need}"
    )]
    TruncatedWindow {
        id: String,
        face_have: usize,
        face_need: usize,
        depth_have: usize,
        depth_need: usize,
        motion_have: usize,
        motion_need: usize,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }
}
