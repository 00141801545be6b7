//! Token-level training clips built from rendered episode pairs.

use serde::{Deserialize, Serialize};

use crate::dataset::TrainingPair;
use crate::denoiser::{geometry_tokens, patchify_frames, zero_geometry, DenoiserConfig};
use crate::engine::{select_reference, warp_condition};
use crate::error::{Error, Result};
use crate::microworld::Episode;
use crate::raster::{Mask, Raster};
use crate::tensor::Mat;

use super::rollout::ChunkConditions;
use super::Task;

/// Blur radius of the synthetic domain.
pub const BLUR_RADIUS: usize = 1;

/// Texture domain of a corpus. Blurred clips stand in for the synthetic
/// (rendered) data the motion teacher learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sharp,
    Blurred,
}

/// One target path with its conditions, in token form.
#[derive(Debug, Clone)]
pub struct Clip {
    pub tag: usize,
    /// Reference tokens used for chunk `i`.
    pub references: Vec<Mat>,
    /// Ground-truth tokens of chunk `i`.
    pub targets: Vec<Mat>,
    /// Warp tokens of chunk `i`.
    pub geometry: Vec<Mat>,
    pub masks: Vec<Vec<Mask>>,
    pub frames: Vec<Raster>,
}

impl Clip {
    pub fn chunks(&self) -> usize {
        self.targets.len()
    }

    /// Per-chunk conditions for `task`, truncated to `chunks`. T2V keeps only
    /// the tag: no reference and zero geometry.
    pub fn conditions(&self, config: &DenoiserConfig, task: Task, chunks: usize) -> Vec<ChunkConditions> {
        (0..chunks.min(self.chunks()))
            .map(|i| match task {
                Task::V2V => ChunkConditions { reference: Some(self.references[i].clone()), geometry: self.geometry[i].clone() },
                Task::T2V => ChunkConditions { reference: None, geometry: zero_geometry(config) },
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: DenoiserConfig,
    pub domain: Domain,
    pub clips: Vec<Clip>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

fn in_domain(ep: &Episode, domain: Domain) -> Episode {
    let mut out = ep.clone();
    if domain == Domain::Blurred {
        out.frames = ep.frames.iter().map(|f| f.box_blur(BLUR_RADIUS)).collect();
    }
    out
}

/// Tokenise `pairs` for `config`. Blurred corpora blur both the reference
/// and the target frames, so the warp condition is blurred as well.
pub fn build_corpus(config: &DenoiserConfig, pairs: &[TrainingPair], domain: Domain) -> Result<Corpus> {
    config.validate()?;
    let kk = config.chunk_len;
    let mut clips = Vec::with_capacity(pairs.len());
    for pair in pairs {
        for ep in [&pair.reference, &pair.target] {
            ep.validate()?;
            if ep.chunk_len != kk {
                return Err(Error::Condition(format!("episode chunks of {} frames, model expects {kk}", ep.chunk_len)));
            }
            let f = &ep.frames[0];
            if (f.height, f.width) != (config.frame_height, config.frame_width) {
                return Err(Error::Condition(format!("{}x{} frames for a {}x{} model", f.height, f.width, config.frame_height, config.frame_width)));
            }
            if ep.scene_tag >= config.tag_vocab {
                return Err(Error::Condition(format!("scene tag {} outside the vocabulary", ep.scene_tag)));
            }
        }
        let reference = in_domain(&pair.reference, domain);
        let target = in_domain(&pair.target, domain);
        let mut clip = Clip {
            tag: target.scene_tag,
            references: Vec::new(),
            targets: Vec::new(),
            geometry: Vec::new(),
            masks: Vec::new(),
            frames: target.frames.clone(),
        };
        for i in 0..target.chunk_count() {
            let r = select_reference(&reference, i, false)?;
            let warps = warp_condition(&reference, r, &target.poses[i * kk..(i + 1) * kk], None)?;
            clip.references.push(patchify_frames(config, &reference.frames[r * kk..(r + 1) * kk])?);
            clip.targets.push(patchify_frames(config, &target.frames[i * kk..(i + 1) * kk])?);
            clip.geometry.push(geometry_tokens(config, &warps)?);
            clip.masks.push(warps.into_iter().map(|w| w.mask).collect());
        }
        clips.push(clip);
    }
    Ok(Corpus { config: config.clone(), domain, clips })
}
