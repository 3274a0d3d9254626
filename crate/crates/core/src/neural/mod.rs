//! Tensor kernels, the EddyNet model family, checkpoints and gradient checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use model::{
    architecture, init_params, model_backward, model_forward, param_table, target_batch, LayerKind, LayerSpec,
    ModelParams, Variant,
};
pub use ops::{Activation, Mode};
pub use tensor::{Real, Tensor};
