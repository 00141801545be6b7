//! Interactive world generation at desk scale.
//!
//! A camera is steered chunk by chunk through a procedurally rendered
//! micro-world. Each chunk is produced by a small block-causal transformer
//! that reads a reference clip, recent history and a depth-warped view of the
//! reference at the commanded pose.
//!
//! - [`geometry`]: poses, intrinsics, commands, warping and trajectory error.
//! - [`microworld`]: ray-cast scenes with exact depth and episode generation.
//! - [`denoiser`]: the transformer, its token layout and checkpoints.
//! - [`stcache`]: the bounded key/value cache and chunk-wise gradient replay.
//! - [`distill`]: teacher training, causal initialisation and distribution
//!   matching distillation.
//! - [`engine`]: streaming sessions, point-cloud memory and evaluation.

pub mod autograd;
pub mod dataset;
pub mod distill;
pub mod engine;
pub mod denoiser;
pub mod error;
pub mod geometry;
pub mod microworld;
pub mod optim;
pub mod raster;
pub mod rng;
pub mod stcache;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{CommandKind, DepthMap, InteractionCommand, Intrinsics, Pose, WarpResult};
pub use raster::{Mask, Raster};
pub use tensor::Mat;
