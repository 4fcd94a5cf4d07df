//! Losses, optimizer, the trainable model and the training loop.

mod checkpoint;
mod losses;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, Tensor, CKPT_MAGIC, CKPT_VERSION};
pub use losses::{
    depth_loss, depth_terms, segmentation_loss, segmentation_loss_backward, segmentation_terms, total_loss,
    LossComponents, LossWeights,
};
pub use model::{CanonicalGaussians, FrameSupervision, LossReport, Model, ModelConfig, Supervision};
pub use optim::{adam_step, lr_at, OptimizerConfig, OptimizerState};
pub use train::{
    evaluate_offsets, param_name, train, train_from, EvalRecord, LogRecord, TrainConfig, TrainOutcome,
    DEFAULT_FRAME_OFFSETS,
};
