use thiserror::Error;

use crate::lineage::NodeId;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("invalid detection {id}: {reason}")]
    InvalidDetection { id: NodeId, reason: String },
    #[error("detection {id} is missing feature channel `{channel}`")]
    MissingFeature { id: NodeId, channel: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("window has {got} tokens, model accepts at most {max}")]
    WindowTooLarge { got: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(
        "ILP component with {edges} candidate edges exceeds the budget of {budget}; split the video into temporal chunks"
    )]
    IlpBudget { edges: usize, budget: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrackError> = std::result::Result<T, E>;
