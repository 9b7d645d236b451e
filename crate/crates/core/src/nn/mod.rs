//! Minimal differentiable numerical core with hand-derived gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Buffer, Checkpoint};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use layers::{
    affine_backward, affine_forward, batch_norm, batch_norm_backward, mse_loss, relu, relu_backward, BatchNormCache,
    BatchNormState, Mode,
};
pub use optim::{adam_step, AdamState, PlateauScheduler};
pub use params::{Grads, Param, ParamStore};
pub use tensor::Tensor2D;
