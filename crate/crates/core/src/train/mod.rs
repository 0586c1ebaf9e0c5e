//! Target assignment, the three-part detection loss and a small SGD trainer.

mod assign;
mod loss;
mod trainer;

pub use assign::{assign_targets, centered_iou, Target};
pub use loss::{compute_loss, loss_and_grads, LossBreakdown};
pub use trainer::{stack, train_step, train_tiny, Sgd, TrainConfig, TrainSample, BN_MOMENTUM, DIVERGENCE_LIMIT};
