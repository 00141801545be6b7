//! Conversions between frames and token blocks.
//!
//! Tokens are non-overlapping `p × p` patches in row-major patch order, frame
//! after frame. Inside a token the values run `(dy, dx, channel)`. Pixel values
//! in `[0, 1]` map to latents `2v − 1`.

use crate::error::{Error, Result};
use crate::geometry::WarpResult;
use crate::raster::Raster;
use crate::tensor::Mat;

use super::{DenoiserConfig, IMAGE_CHANNELS};

fn check_frame(config: &DenoiserConfig, h: usize, w: usize, c: usize) -> Result<()> {
    if h != config.frame_height || w != config.frame_width || c != IMAGE_CHANNELS {
        return Err(Error::Shape(format!(
            "frame is {h}x{w}x{c}, model expects {}x{}x{IMAGE_CHANNELS}",
            config.frame_height, config.frame_width
        )));
    }
    Ok(())
}

/// Fill `out` rows `[row0, row0 + P)` with the patches of a per-pixel field
/// of `channels` values produced by `value(y, x, c)`.
fn write_patches(config: &DenoiserConfig, out: &mut Mat, row0: usize, channels: usize, value: impl Fn(usize, usize, usize) -> f64) {
    let p = config.patch;
    let per_row = config.frame_width / p;
    for t in 0..config.patches_per_frame() {
        let (py, px) = (t / per_row, t % per_row);
        let row = out.row_mut(row0 + t);
        let mut i = 0;
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..channels {
                    row[i] = value(py * p + dy, px * p + dx, c);
                    i += 1;
                }
            }
        }
    }
}

/// Tokens for a chunk of `K` frames: `K·P × 3p²`.
pub fn patchify_frames(config: &DenoiserConfig, frames: &[Raster]) -> Result<Mat> {
    if frames.len() != config.chunk_len {
        return Err(Error::Shape(format!("chunk has {} frames, expected {}", frames.len(), config.chunk_len)));
    }
    let pf = config.patches_per_frame();
    let mut out = Mat::zeros(config.tokens(), config.latent_dim());
    for (k, f) in frames.iter().enumerate() {
        check_frame(config, f.height, f.width, f.channels)?;
        write_patches(config, &mut out, k * pf, IMAGE_CHANNELS, |y, x, c| 2.0 * f.pixel(y, x)[c] as f64 - 1.0);
    }
    Ok(out)
}

/// Frame `k` of a token block, with latents mapped back and clamped to `[0, 1]`.
pub fn decode_frame(config: &DenoiserConfig, tokens: &Mat, k: usize) -> Raster {
    let p = config.patch;
    let per_row = config.frame_width / p;
    let pf = config.patches_per_frame();
    let mut out = Raster::zeros(config.frame_height, config.frame_width, IMAGE_CHANNELS);
    for t in 0..pf {
        let (py, px) = (t / per_row, t % per_row);
        let row = tokens.row(k * pf + t);
        let mut i = 0;
        for dy in 0..p {
            for dx in 0..p {
                let px_out = out.pixel_mut(py * p + dy, px * p + dx);
                for v in px_out.iter_mut() {
                    *v = ((row[i] + 1.0) * 0.5).clamp(0.0, 1.0) as f32;
                    i += 1;
                }
            }
        }
    }
    out
}

/// All `K` frames of a token block.
pub fn unpatchify_block(config: &DenoiserConfig, tokens: &Mat) -> Vec<Raster> {
    (0..config.chunk_len).map(|k| decode_frame(config, tokens, k)).collect()
}

/// Geometric condition tokens `K·P × 4p²` from one warp per frame. Covered
/// pixels carry the warped latent colour and a mask of 1; holes are all zero.
pub fn geometry_tokens(config: &DenoiserConfig, warps: &[WarpResult]) -> Result<Mat> {
    if warps.len() != config.chunk_len {
        return Err(Error::Shape(format!("{} warps for a chunk of {}", warps.len(), config.chunk_len)));
    }
    let pf = config.patches_per_frame();
    let mut out = Mat::zeros(config.tokens(), config.geometry_dim());
    for (k, w) in warps.iter().enumerate() {
        check_frame(config, w.frame.height, w.frame.width, w.frame.channels)?;
        write_patches(config, &mut out, k * pf, IMAGE_CHANNELS + 1, |y, x, c| {
            if !w.mask.get(y, x) {
                0.0
            } else if c == IMAGE_CHANNELS {
                1.0
            } else {
                2.0 * w.frame.pixel(y, x)[c] as f64 - 1.0
            }
        });
    }
    Ok(out)
}

/// Geometric channels for an unconditioned pass.
pub fn zero_geometry(config: &DenoiserConfig) -> Mat {
    Mat::zeros(config.tokens(), config.geometry_dim())
}
