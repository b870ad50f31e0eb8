//! A small reverse-mode training engine: dense and 1-D (transpose)
//! convolution layers, dropout, ReLU/sigmoid, binary cross-entropy, L2
//! penalties and the Adamax/Adam/SGD optimizers.
//!
//! Inner products are delegated to `matrixmultiply` (single-threaded), so
//! training is bit-reproducible for a given seed.

pub mod gradcheck;
mod layers;
mod loss;
mod model;
mod optim;
mod serialize;
mod tensor;
mod train;

pub use layers::{Init, Layer, LayerSpec, Param, SIGMOID_EPS};
pub use loss::{bce_loss, BCE_EPS};
pub use model::Model;
pub use optim::{Adam, Adamax, Optimizer, Sgd};
pub use serialize::{FORMAT_VERSION, MAGIC};
pub use tensor::{Real, Tensor};
pub use train::{fit, fit_with, train_epoch, InMemoryData, TrainingData};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("tensor shape {shape:?} does not match {len} elements")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("layer {layer} ({kind}) expects input {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {layer}: invalid specification: {reason}")]
    InvalidSpec { layer: usize, reason: String },
    #[error("layer {layer}: backward called without a forward cache")]
    MissingCache { layer: usize },
    #[error("loss inputs differ in shape: {pred:?} vs {target:?}")]
    LossShape { pred: Vec<usize>, target: Vec<usize> },
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("not a model file")]
    NotAModel,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("model file truncated")]
    Truncated,
    #[error("model checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            NnError::ShapeMismatch {
                kind, expected, got, ..
            } => NnError::ShapeMismatch {
                layer: index,
                kind,
                expected,
                got,
            },
            NnError::MissingCache { .. } => NnError::MissingCache { layer: index },
            other => other,
        }
    }
}
