//! Hebbian learning (soft winner-takes-all and Hebbian PCA) for
//! convolutional and transpose-convolutional layers, and a two-stage
//! semi-supervised segmentation pipeline built on it: unsupervised Hebbian
//! pre-training of a small UNet-like network, then supervised fine-tuning
//! (or linear probing) on a labelled subset.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod layers;
pub mod metrics;
pub mod oracles;
pub mod pretrain;
pub mod rules;
pub mod segnet;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use rules::{HebbianConfig, Rule, TconvVariant};
pub use tensor::{ConvGeometry, Tensor};
