//! Dense classifier kernel: forward and backward passes, binary cross-entropy,
//! Adam, and the minibatch training loop.

mod adam;
mod mlp;
mod train;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use mlp::{bce_loss, build_mlp, MlpClassifier, Mode, BN_EPS, BN_MOMENTUM, DEFAULT_DROPOUT, DEFAULT_LAYER_DIMS};
pub use train::{predict_rows, train_epochs, EpochStats, LocalObjective, PriorGradient, TrainConfig};
