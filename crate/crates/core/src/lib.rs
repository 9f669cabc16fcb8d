//! Self-supervised pre-training of small vision transformers: a contrastive
//! objective between two augmented views, plus a lightweight decoder that
//! reconstructs raw pixels from patch tokens tapped at several encoder
//! depths. The two losses are balanced by learned uncertainty weights.
//!
//! - [`encoder`]: patch embedding, transformer blocks, tapped features.
//! - [`contrastive`]: projector/predictor heads, InfoNCE and cosine losses,
//!   the negative queue and the moving-average target.
//! - [`decoder`]: multi-level fusion decoder and the L1 reconstruction loss.
//! - [`objective`]: the uncertainty-weighted combination.
//! - [`pipeline`]: configuration, data, augmentation, training, checkpoints,
//!   linear probe, diagnostics and ablations.
//!
//! Tensors and autodiff come from `repre-tensor`. The guide under `book/`
//! walks through each part; its code blocks run as doctests of this crate.

pub mod contrastive;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradsuite;
pub mod nn;
pub mod objective;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
