//! Learned point-cloud geometry codec.
//!
//! A point cloud is voxelized and turned into a coarse-to-fine pyramid of
//! 8-bit occupancy codes ([`geometry`]). A shared-parameter context model
//! ([`ucm`]) predicts every code from the coarser scale, a checkerboard split
//! of the current scale and a low/high nibble cascade. The predicted tables
//! drive a 16-ary range coder ([`coder`]). Per-instance fine-tuning of the
//! prediction heads ([`iaft`]) ships quantized weight deltas alongside the
//! geometry. [`codec`] ties everything into one container format with a
//! lossless mode and a top-k lossy mode, and [`bench`] synthesizes corpora
//! and measures bpp, CR-Gain and D1 PSNR.

pub mod bench;
pub mod codec;
pub mod coder;
mod error;
pub mod geometry;
pub mod iaft;
pub mod tensor;
pub mod ucm;

pub use error::{Error, Result};
