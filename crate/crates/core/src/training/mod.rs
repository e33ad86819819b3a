//! Loss, optimizer, augmentation and the training loop.

mod augment;
mod loss;
mod optim;
mod trainer;

pub use augment::{
    affine, augment, blackout, blur, fix_size, gaussian_noise, reflect_index, reverse_time, shuffle_points,
    skip_frames, AffineParams, AugmentConfig,
};
pub use loss::{loss_terms, trajectory_loss};
pub use optim::{lr_at, Adam, AdamConfig, Schedule, StepOutcome};
pub use trainer::{evaluate, train, LogRecord, TrainConfig, TrainOutcome};
