//! Minimal differentiable tensor kernel.
//!
//! Exactly the operations the patch classifier needs: 1×1 and 3×3
//! convolution, PReLU/ReLU, 2×2 and global average pooling, channel
//! concatenation, fully connected layers, softmax and cross-entropy, with
//! reverse-mode gradients and an Adam optimizer. Everything runs in fp64.

mod checkpoint;
mod graph;
pub mod ops;
mod param;
mod tensor;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{Graph, Var};
pub use ops::{
    avg_pool2x2, concat_channels, conv2d, cross_entropy, fully_connected, global_avg_pool, prelu, relu, softmax,
};
pub use param::{adam_step, msra_init, AdamConfig, Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("row {row} is not a probability distribution (sums to {sum})")]
    InvalidDistribution { row: usize, sum: f64 },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("loss is not the output of a recorded operation")]
    NoGraph,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint at offset {offset}: {reason}")]
    BadCheckpoint { offset: usize, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> NnError {
        NnError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
