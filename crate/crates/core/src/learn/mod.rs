//! Point encoder, contrastive losses and the training loop.

pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use loss::{
    caption_loss, clip_style_loss, pdc_loss, rpdc_loss, supervised_ce_loss, LossInstance, LossKind, LossResult,
    RegionTarget,
};
pub use model::{encode_points, ModelConfig, ModelParams};
pub use train::{train, TrainConfig, TrainLog};
