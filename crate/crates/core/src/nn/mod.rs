//! Minimal differentiable network stack: tensors, layers, the pose-regression
//! model, uncertainty-weighted losses, Adam, training, and model files.

pub mod adam;
pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, ModelIoError};
pub use layers::{Conv2d, Dense};
pub use loss::{
    block_losses, loss_beta, loss_homoscedastic, loss_stable, loss_stable_grad, LossError,
    LossNorm,
};
pub use model::{
    Backbone, BackboneId, ForwardTrace, Gradients, Lineage, Mode, ModelNorm, NnError,
    PoseNetModel, RegressorHead,
};
pub use tensor::{ShapeMismatch, TensorBatch};
pub use train::{train, TrainConfig, TrainError, TrainReport, TrainSet};
