//! Dense tensors, a reverse-mode autodiff tape and the layers built on it.

use ndarray::Array2;
use thiserror::Error;

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{conv_maxpool_window, Graph, NodeId, LAYER_NORM_EPS};
pub use layers::{ConvBank, Encoder, EncoderConfig, Ffn, LayerNorm, Linear};
pub use params::{Gradients, Optimizer, OptimizerConfig, OptimizerKind, ParamId, ParamStore};

pub type Tensor = Array2<f64>;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("sequence of {len} tokens exceeds the encoder limit of {max}; filter long turns when loading the corpus")]
    TooLong { len: usize, max: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
