//! Masked Dice training on random augmented patches.

mod convergence;
mod loss;
mod patch;
mod trainer;

pub use convergence::{convergence_check, Convergence, LossHistory, StopReason, MAX_INCREASE, MIN_DECREASE};
pub use loss::{soft_dice, soft_dice_loss, DICE_EPS};
pub use patch::{
    apply_transform, augment, normalize_ct, sample_patch, volume_tensor, AugmentParams, Patch, Scan, TrainSample,
    Transform,
    HU_MAX, HU_MIN,
};
pub use trainer::{train, validation_samples, TrainConfig, TrainOutcome, Trainer};
