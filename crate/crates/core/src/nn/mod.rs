//! Layers, losses and optimizers for LeNet-scale CNNs and dense autoencoders.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod optim;
pub mod pool;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{conv2d_backward, conv2d_forward, window_output_extent, ConvGrads};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use gradcheck::{finite_difference_check, Differentiable, GradCheckReport, LayerObjective};
pub use layer::{Layer, LayerSpec, Param};
pub use loss::{cross_entropy_batch, cross_entropy_loss, l1_activity_penalty, mse_loss, LossValue};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerConfig};
pub use pool::{maxpool2d, maxpool2d_backward, maxpool2d_padded};
