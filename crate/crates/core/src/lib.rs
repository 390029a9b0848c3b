//! Mask-guided diffusion data augmentation for single-structure segmentation.
//!
//! The crate is `no_std` (with `alloc`) so the numeric kernels can be reused on
//! targets without an OS. Everything here is a pure function of its inputs and
//! seeds; file formats, the CLI and the review service live in the `maskdiff`
//! companion crate.
//!
//! Pipeline overview:
//!
//! 1. [`image`] / [`dataset`] / [`phantom`]: annotated pairs, tri-channel
//!    composition (mask injected as one colour plane), splits, phantom data.
//! 2. [`lora`] + [`diffusion`]: a compact class-conditional pixel-space
//!    denoiser trained on tri-channel images, with per-trimester LoRA adapters.
//! 3. [`ellipse`] + [`extraction`]: threshold, keep the largest component, fit
//!    an ellipse, fill it, and grade the result for review.
//! 4. [`curation`]: the review state machine behind the human correction step.
//! 5. [`segmentor`]: frozen encoders plus a trainable mask decoder, fine-tuned
//!    with CE + Dice on hybrid real/synthetic data.
//! 6. [`augment`] / [`harness`]: classical baselines and the experiment grid.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod curation;
pub mod dataset;
pub mod diffusion;
pub mod ellipse;
pub mod extraction;
pub mod harness;
pub mod image;
pub mod lora;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod segmentor;

pub use ellipse::EllipseParams;
pub use image::{
    AnnotatedPair, BinaryMask, GrayImage, ImageError, Provenance, TriChannelImage, TrimesterLabel,
};
