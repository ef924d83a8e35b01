use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrnError>;

#[derive(Debug, Error)]
pub enum GrnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GrnError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        GrnError::Shape { op, left, right }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            GrnError::InvalidArgument(_)
                | GrnError::Parse { .. }
                | GrnError::Config(_)
                | GrnError::Checkpoint(_)
                | GrnError::Empty(_)
                | GrnError::Shape { .. }
                | GrnError::UnknownNode(_)
        )
    }
}
