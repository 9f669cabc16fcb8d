//! Data, augmentation, training loop, persistence and evaluation.

pub mod ablate;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dump;
pub mod optim;
pub mod probe;
pub mod train;
