//! Trainable heatmap detector: a three-block convolutional encoder with a
//! 65-way cell-softmax head, its loss, optimizer, augmentation, training
//! loop and checkpoints.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, AugmentConfig, AugmentOps};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{loss, loss_and_grad};
pub use network::{forward, forward_many, DetectorParams, Layout};
pub use train::{batch_gradient, batch_loss, train, BatchGradient, TrainConfig, TrainReport};
