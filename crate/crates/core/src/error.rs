use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("derivative orders ({i},{j}) out of range for kernel size {k}")]
    InvalidOrder { i: usize, j: usize, k: usize },

    #[error("spatial domain {h}x{w} too small for kernel size {k}")]
    DomainTooSmall { h: usize, w: usize, k: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("expected {expected} frames, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("split infeasible: {situations} situations cannot fill {nonzero} nonzero splits")]
    InfeasibleSplit { situations: usize, nonzero: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
