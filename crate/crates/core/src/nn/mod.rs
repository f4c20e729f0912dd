//! Neural network stack written from scratch: tensors, layers with exact
//! analytic gradients, ADAM, a training loop with early stopping, and a
//! finite-difference gradient checker.
//!
//! Layers operate on batches stored channels-last (`[N, H, W, C]`, `[N, L, C]`)
//! so inner loops run over contiguous memory. Sequence models carry a leading
//! time axis that convolutional stages fold into the batch dimension; the LSTM
//! stack consumes it.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod tensor;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use gradcheck::{gradient_check, gradient_check_cast, max_rel_error, GradCheckReport};
pub use layers::{ArchShapes, LayerSpec};
pub use model::{
    loss_and_grad, loss_grads, Forward, Grads, Mode, ModelParams, Param, PROB_CLAMP,
};
pub use tensor::Tensor;
pub use train::{accuracy, evaluate, predict_classes, train, DataSet, EpochStats, TrainConfig, TrainOutcome};

use thiserror::Error;

/// Errors raised by tensor and model operations.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {layer} ({kind}) cannot consume input shape {shape:?}")]
    BadLayerInput {
        layer: usize,
        kind: String,
        shape: Vec<usize>,
    },
    #[error("non-finite activation in layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: String },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}
