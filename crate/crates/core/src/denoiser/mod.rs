//! Block-causal transformer denoiser.
//!
//! One chunk of `K` frames becomes `K·P` tokens (`P` patches per frame). The
//! model predicts the clean chunk from its noisy version while attending to a
//! reference block and a window of history blocks held in a
//! [`StCache`](crate::stcache::StCache), and while reading the warped frame and
//! its validity mask through extra input channels of the current block.

mod checkpoint;
mod latent;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorRecord, TrainingStage};
pub use latent::{decode_frame, geometry_tokens, patchify_frames, unpatchify_block, zero_geometry};
pub use model::{ChunkDenoiser, Denoiser, ForwardOutput, Layout, Segment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Architecture and token-grid shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    /// Model channel width `C`.
    pub width: usize,
    pub mlp_hidden: usize,
    /// Square patch edge in pixels.
    pub patch: usize,
    /// Frames per chunk `K`.
    pub chunk_len: usize,
    /// History window `W`, in blocks.
    pub history_window: usize,
    pub rotary_base: f64,
    /// Geometric condition channels per pixel: image channels plus the mask.
    pub geometric_channels: usize,
    pub tag_vocab: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Initial scale of the output projection, relative to fan-in scaling.
    pub output_init: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            mlp_hidden: 128,
            patch: 8,
            chunk_len: crate::microworld::DEFAULT_CHUNK,
            history_window: 1,
            rotary_base: 10_000.0,
            geometric_channels: 4,
            tag_vocab: crate::microworld::TAG_COUNT,
            frame_height: crate::microworld::DEFAULT_RESOLUTION,
            frame_width: crate::microworld::DEFAULT_RESOLUTION,
            output_init: 1.0,
        }
    }
}

pub const IMAGE_CHANNELS: usize = 3;

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.chunk_len == 0 || self.patch == 0 {
            return bad("layers, heads, width, patch and K must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if (self.width / self.heads) % 2 != 0 {
            return bad("rotary needs an even head width".into());
        }
        if self.frame_height % self.patch != 0 || self.frame_width % self.patch != 0 {
            return bad(format!("{}x{} frames do not tile into {} px patches", self.frame_height, self.frame_width, self.patch));
        }
        if self.geometric_channels != IMAGE_CHANNELS + 1 {
            return bad("geometric channels must be image channels plus one mask channel".into());
        }
        if self.history_window == 0 {
            return bad("history window must hold at least one block".into());
        }
        if !(self.output_init.is_finite() && self.output_init >= 0.0) {
            return bad(format!("output init scale {}", self.output_init));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.frame_height / self.patch) * (self.frame_width / self.patch)
    }

    /// `K·P`
    pub fn tokens(&self) -> usize {
        self.chunk_len * self.patches_per_frame()
    }

    /// Values per latent token: one patch of image channels.
    pub fn latent_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch * self.patch
    }

    pub fn geometry_dim(&self) -> usize {
        self.geometric_channels * self.patch * self.patch
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim() + self.geometry_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn bands(&self) -> PositionBands {
        PositionBands::contiguous(self.tokens(), self.history_window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Current,
    History,
    Reference,
}

/// One chunk of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    /// `K·P × latent_dim`
    pub tokens: Mat,
    pub chunk_index: usize,
    pub kind: BlockKind,
}

impl LatentBlock {
    pub fn new(tokens: Mat, chunk_index: usize, kind: BlockKind) -> Self {
        Self { tokens, chunk_index, kind }
    }

    pub fn check(&self, config: &DenoiserConfig) -> Result<()> {
        if self.tokens.shape() != (config.tokens(), config.latent_dim()) {
            return Err(Error::Shape(format!(
                "block is {:?}, config expects {}x{}",
                self.tokens.shape(),
                config.tokens(),
                config.latent_dim()
            )));
        }
        Ok(())
    }
}

/// Fixed rotary position origins. Each band spans `K·P` positions and none
/// depends on the chunk index being generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionBands {
    pub reference_start: usize,
    /// Start of the oldest history slot.
    pub history_start: usize,
    pub current_start: usize,
    pub tokens: usize,
}

impl PositionBands {
    /// Reference, then `window` history slots, then the current block.
    pub fn contiguous(tokens: usize, window: usize) -> Self {
        Self { reference_start: 0, history_start: tokens, current_start: tokens * (1 + window), tokens }
    }

    /// Start of the history slot holding the block `age` chunks back
    /// (`age = 1` is the most recent and sits just below the current band).
    pub fn history_slot(&self, age: usize) -> usize {
        debug_assert!(age >= 1);
        self.current_start - age * self.tokens
    }

    pub fn start(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Current => self.current_start,
            BlockKind::Reference => self.reference_start,
            BlockKind::History => self.history_slot(1),
        }
    }

    pub fn disjoint(&self) -> bool {
        let spans = [self.reference_start, self.history_slot(1), self.current_start];
        spans.iter().enumerate().all(|(i, a)| spans[i + 1..].iter().all(|b| a + self.tokens <= *b || b + self.tokens <= *a))
    }
}

/// Rotary positions for the tokens of a block of `kind`: token `j` gets
/// `band_start + j`, independent of the chunk index.
pub fn assign_positions(kind: BlockKind, bands: &PositionBands) -> Vec<usize> {
    let start = bands.start(kind);
    (start..start + bands.tokens).collect()
}

/// Key segments visible to the current block, in attention order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyLayout {
    pub reference: Option<usize>,
    pub history: Vec<usize>,
    pub current: usize,
}

impl KeyLayout {
    pub fn key_count(&self) -> usize {
        self.reference.unwrap_or(0) + self.history.iter().sum::<usize>() + self.current
    }
}

/// Query × key visibility for the current block. Only current tokens issue
/// queries; they see every cached segment and the whole current block.
pub fn attention_mask(layout: &KeyLayout) -> Vec<bool> {
    vec![true; layout.current * layout.key_count()]
}

/// Noise levels for sampling, strictly decreasing and positive. The last
/// denoising call produces the σ = 0 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
}

pub const SIGMA_MAX: f64 = 4.0;
pub const SIGMA_MIN: f64 = 0.05;

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        let ok = !sigmas.is_empty()
            && sigmas.iter().all(|s| s.is_finite() && *s > 0.0)
            && sigmas.windows(2).all(|w| w[0] > w[1]);
        if ok {
            Ok(Self { sigmas })
        } else {
            Err(Error::Invalid(format!("noise schedule must be strictly decreasing and positive: {sigmas:?}")))
        }
    }

    /// `count` levels spaced geometrically from `max` down to `min`.
    pub fn geometric(count: usize, max: f64, min: f64) -> Self {
        let sigmas = if count == 1 {
            vec![max]
        } else {
            let ratio = (min / max).powf(1.0 / (count - 1) as f64);
            (0..count).map(|i| max * ratio.powi(i as i32)).collect()
        };
        Self::new(sigmas).expect("geometric schedule is valid")
    }

    /// Four-step student schedule.
    pub fn few_step() -> Self {
        Self::geometric(4, SIGMA_MAX, SIGMA_MIN)
    }

    /// Denser teacher schedule.
    pub fn teacher() -> Self {
        Self::geometric(8, SIGMA_MAX, SIGMA_MIN)
    }

    pub fn count(&self) -> usize {
        self.sigmas.len()
    }
}
