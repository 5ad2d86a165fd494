//! Class-incremental semantic segmentation with filtered web-style replay.
//!
//! The crate bundles a synthetic segmentation world, a small from-scratch
//! segmentation model, the replay block (source queries, PSNR dedup,
//! pseudo-labeling), adversarial and size-based replay selection, the two
//! self-inpainting label rewrites, the incremental trainer and evaluation.

pub mod error;
pub mod eval;
pub mod image;
pub mod inpaint;
pub mod replay;
pub mod rng;
pub mod segmodel;
pub mod selection;
pub mod shapeworld;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{ClassId, Image, LabelMap, BACKGROUND};
