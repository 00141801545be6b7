//! Streaming generation: sessions, point-cloud memory, run files and
//! evaluation.
//!
//! A [`Session`] turns one [`InteractionCommand`] into one chunk of frames.
//! Each chunk is conditioned on the index-aligned reference chunk (through the
//! cache), on the previous generated chunk (history), and on a depth warp of
//! the reference frames into the commanded camera poses.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::PoseRecord;
use crate::denoiser::{
    decode_frame, geometry_tokens, patchify_frames, zero_geometry, BlockKind, ChunkDenoiser, DenoiserConfig, LatentBlock,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::geometry::{
    accumulate, command_to_delta, relative, reproject, trajectory_error, unproject_colored, CloudPoint, DepthMap,
    InteractionCommand, Intrinsics, Pose, TrajectoryError, WarpResult,
};
use crate::microworld::{chunk_frame_poses, render, Difficulty, Episode, SceneSpec};
use crate::raster::{Mask, Raster};
use crate::rng::RngCursor;
use crate::stcache::{KvEntry, StCache};
use crate::tensor::Mat;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

/// Which conditions a rollout feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Reference entry, history and warp.
    Full,
    /// Scene tag and history only; reference and warp inputs are zeroed.
    TagOnly,
}

/// Index of the reference chunk used for generated chunk `i`: the aligned
/// chunk, clamped to the last one. In strict mode running past the end fails.
pub fn select_reference(reference: &Episode, i: usize, strict: bool) -> Result<usize> {
    let last = reference.chunk_count().checked_sub(1).ok_or_else(|| Error::Invalid("empty reference episode".into()))?;
    if strict && i > last {
        return Err(Error::ReferenceExhausted(i));
    }
    Ok(i.min(last))
}

/// Tokens of reference chunk `r`.
pub fn reference_block(config: &DenoiserConfig, reference: &Episode, r: usize) -> Result<LatentBlock> {
    let k = reference.chunk_len;
    let tokens = patchify_frames(config, &reference.frames[r * k..(r + 1) * k])?;
    Ok(LatentBlock::new(tokens, r, BlockKind::Reference))
}

/// Warps of reference chunk `r` into `frame_poses`: frame `k` of the chunk is
/// warped from reference frame `r·K + k` with that frame's depth. Memory
/// points, if any, are splatted into the same z-buffer.
pub fn warp_condition(
    reference: &Episode,
    r: usize,
    frame_poses: &[Pose],
    memory: Option<&PointCloudMemory>,
) -> Result<Vec<WarpResult>> {
    let kk = reference.chunk_len;
    if frame_poses.len() != kk {
        return Err(Error::Shape(format!("{} frame poses for chunks of {kk}", frame_poses.len())));
    }
    frame_poses
        .iter()
        .enumerate()
        .map(|(k, target)| {
            let src = r * kk + k;
            let rel = relative(target, &reference.poses[src]);
            let mut w = reproject(&reference.frames[src], &reference.depths[src], &reference.intrinsics, &rel)?;
            if let Some(mem) = memory {
                mem.splat_into(&mut w, &reference.intrinsics, target);
            }
            Ok(w)
        })
        .collect()
}

/// Depth for a camera pose at a scene time.
pub trait DepthSource: Send + Sync {
    fn depth(&self, pose: &Pose, t: usize) -> DepthMap;
}

/// Exact depth from the micro-world renderer.
#[derive(Debug, Clone)]
pub struct SceneDepth {
    pub scene: SceneSpec,
    pub intrinsics: Intrinsics,
}

impl DepthSource for SceneDepth {
    fn depth(&self, pose: &Pose, t: usize) -> DepthMap {
        render(&self.scene, pose, &self.intrinsics, t).1
    }
}

/// World-space points lifted from generated frames, capped at `budget` and
/// evicted oldest source chunk first.
#[derive(Debug, Clone, Default)]
pub struct PointCloudMemory {
    points: VecDeque<(CloudPoint, usize)>,
    budget: usize,
}

impl PointCloudMemory {
    pub fn new(budget: usize) -> Self {
        Self { points: VecDeque::new(), budget }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn oldest_chunk(&self) -> Option<usize> {
        self.points.front().map(|p| p.1)
    }

    /// Add points from chunk `chunk`. Inputs are appended in order, so the
    /// front of the queue always holds the oldest source chunk.
    pub fn extend(&mut self, points: impl IntoIterator<Item = CloudPoint>, chunk: usize) {
        for p in points {
            self.points.push_back((p, chunk));
            if self.points.len() > self.budget {
                self.points.pop_front();
            }
        }
    }

    /// Splat every point into `warp` as seen from `world_from_cam`.
    pub fn splat_into(&self, warp: &mut WarpResult, k: &Intrinsics, world_from_cam: &Pose) {
        let cam_from_world = world_from_cam.inverse();
        for (p, _) in &self.points {
            warp.splat(k, &cam_from_world.transform_point(&p.position), &p.color);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub conditioning: Conditioning,
    /// Fail instead of clamping once the reference runs out.
    pub strict_reference: bool,
    /// Point-cloud memory budget; `None` disables the memory.
    pub memory_budget: Option<usize>,
    /// Pixel stride when lifting generated frames into memory.
    pub memory_stride: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: NoiseSchedule::few_step(),
            conditioning: Conditioning::Full,
            strict_reference: false,
            memory_budget: None,
            memory_stride: 2,
        }
    }
}

/// One generated chunk.
#[derive(Debug, Clone)]
pub struct ChunkOutput {
    pub index: usize,
    pub frames: Vec<Raster>,
    pub frame_poses: Vec<Pose>,
    /// Pose after the chunk's command.
    pub pose: Pose,
    pub masks: Vec<Mask>,
    /// Mean warp coverage over the chunk's frames.
    pub coverage: f64,
    pub frame_times: Vec<usize>,
    /// x0 tokens of the final denoising step.
    pub tokens: Mat,
}

/// Few-step sampling of one chunk: start from `σ₀·ε` and alternate x0
/// prediction with re-noising at the next level. Noise for step `s` comes
/// from the cursor `(seed, chunk, s)`.
pub fn sample_chunk(
    model: &dyn ChunkDenoiser,
    schedule: &NoiseSchedule,
    cache: &StCache,
    geometry: &Mat,
    tag: usize,
    seed: u64,
    chunk: usize,
) -> Result<Mat> {
    let cfg = model.config();
    let n = cfg.tokens() * cfg.latent_dim();
    let noise = |s: usize| Mat::from_vec(cfg.tokens(), cfg.latent_dim(), RngCursor::new(seed, chunk as u64, s as u64).normals("noise", n));
    let mut x = noise(0);
    x.scale_assign(schedule.sigmas[0]);
    let mut x0 = Mat::zeros(0, 0);
    for (s, &sigma) in schedule.sigmas.iter().enumerate() {
        x0 = model.denoise(&x, sigma, cache, geometry, tag)?;
        if let Some(&next) = schedule.sigmas.get(s + 1) {
            let eps = noise(s + 1);
            x = x0.zip_map(&eps, |a, e| a + next * e);
        }
    }
    if !x0.all_finite() {
        return Err(Error::NonFinite("sampled chunk"));
    }
    Ok(x0)
}

/// Streaming state of one roaming session.
pub struct Session {
    model: Arc<dyn ChunkDenoiser>,
    config: SessionConfig,
    reference: Arc<Episode>,
    cache: StCache,
    pose: Pose,
    chunk: usize,
    time: usize,
    frozen: bool,
    pending: VecDeque<InteractionCommand>,
    memory: Option<PointCloudMemory>,
    depth: Option<Arc<dyn DepthSource>>,
}

impl Session {
    /// Start at the reference's first camera pose.
    pub fn new(model: Arc<dyn ChunkDenoiser>, reference: Arc<Episode>, config: SessionConfig) -> Result<Self> {
        reference.validate()?;
        let cfg = model.config();
        if reference.chunk_len != cfg.chunk_len
            || reference.intrinsics.height != cfg.frame_height
            || reference.intrinsics.width != cfg.frame_width
        {
            return Err(Error::Condition(format!(
                "reference clip is {}x{} with K={}, model expects {}x{} with K={}",
                reference.intrinsics.height, reference.intrinsics.width, reference.chunk_len, cfg.frame_height, cfg.frame_width, cfg.chunk_len
            )));
        }
        if reference.scene_tag >= cfg.tag_vocab {
            return Err(Error::Condition(format!("scene tag {} outside vocabulary", reference.scene_tag)));
        }
        Ok(Self {
            cache: StCache::new(cfg),
            pose: reference.poses[0],
            chunk: 0,
            time: reference.time_offset,
            frozen: false,
            pending: VecDeque::new(),
            memory: config.memory_budget.map(PointCloudMemory::new),
            depth: None,
            model,
            config,
            reference,
        })
    }

    /// Depth provider used to lift generated frames into point-cloud memory.
    pub fn with_depth_source(mut self, depth: Arc<dyn DepthSource>) -> Self {
        self.depth = Some(depth);
        self
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn chunk_index(&self) -> usize {
        self.chunk
    }

    pub fn cache(&self) -> &StCache {
        &self.cache
    }

    pub fn memory(&self) -> Option<&PointCloudMemory> {
        self.memory.as_ref()
    }

    pub fn reference(&self) -> &Episode {
        &self.reference
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Stop (or resume) dynamic scene time.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Queue a command; only the latest queued command is used by the next
    /// [`Session::step_pending`].
    pub fn push_command(&mut self, cmd: InteractionCommand) {
        self.pending.push_back(cmd);
    }

    /// Generate the next chunk from the most recent queued command, or a stop
    /// when none is queued.
    pub fn step_pending(&mut self) -> Result<ChunkOutput> {
        let cmd = self.pending.drain(..).last().unwrap_or_else(InteractionCommand::stop);
        self.step(&cmd)
    }

    /// Generate one chunk under `cmd`.
    pub fn step(&mut self, cmd: &InteractionCommand) -> Result<ChunkOutput> {
        cmd.validate()?;
        let model = self.model.clone();
        let cfg = model.config();
        let i = self.chunk;
        let frame_poses = chunk_frame_poses(&self.pose, cmd, cfg.chunk_len);
        let next_pose = accumulate(&self.pose, &command_to_delta(cmd));
        let r = select_reference(&self.reference, i, self.config.strict_reference)?;
        let tag = self.reference.scene_tag;

        let warps = warp_condition(&self.reference, r, &frame_poses, self.memory.as_ref())?;
        let geometry = match self.config.conditioning {
            Conditioning::Full => {
                self.cache.set_reference(model.encode(&reference_block(cfg, &self.reference, r)?, tag)?)?;
                geometry_tokens(cfg, &warps)?
            }
            Conditioning::TagOnly => zero_geometry(cfg),
        };
        let x0 = sample_chunk(model.as_ref(), &self.config.schedule, &self.cache, &geometry, tag, self.config.seed, i)?;

        let mut entry: KvEntry = model.encode(&LatentBlock::new(x0.clone(), i, BlockKind::History), tag)?;
        entry.cursor = Some(RngCursor::new(self.config.seed, i as u64, 0));
        self.cache.append_history(entry)?;

        let frames: Vec<Raster> = (0..cfg.chunk_len).map(|k| decode_frame(cfg, &x0, k)).collect();
        let frame_times: Vec<usize> = (0..cfg.chunk_len).map(|k| if self.frozen { self.time } else { self.time + k }).collect();
        let coverage = warps.iter().map(WarpResult::coverage).sum::<f64>() / warps.len() as f64;
        let out = ChunkOutput {
            index: i,
            frames,
            frame_poses,
            pose: next_pose,
            masks: warps.into_iter().map(|w| w.mask).collect(),
            coverage,
            frame_times,
            tokens: x0,
        };
        if let (Some(_), Some(depth)) = (&self.memory, self.depth.clone()) {
            self.extend_pointcloud_memory(&out, depth.as_ref());
        }
        self.pose = next_pose;
        self.chunk += 1;
        if !self.frozen {
            self.time += cfg.chunk_len;
        }
        Ok(out)
    }

    /// Lift the generated frames into world points using `depth` at each
    /// frame pose. No-op when the memory is disabled.
    pub fn extend_pointcloud_memory(&mut self, chunk: &ChunkOutput, depth: &dyn DepthSource) {
        let stride = self.config.memory_stride.max(1);
        let k = self.reference.intrinsics;
        let Some(mem) = self.memory.as_mut() else { return };
        for ((frame, pose), &t) in chunk.frames.iter().zip(&chunk.frame_poses).zip(&chunk.frame_times) {
            let mut d = depth.depth(pose, t);
            for (i, v) in d.valid.iter_mut().enumerate() {
                let (y, x) = (i / d.width, i % d.width);
                if y % stride != 0 || x % stride != 0 {
                    *v = false;
                }
            }
            mem.extend(unproject_colored(frame, &d, &k, pose), chunk.index);
        }
    }
}

/// A stand-in model that returns the warped frame on covered pixels and black
/// elsewhere, ignoring noise. Its cache entries are zeros.
#[derive(Debug, Clone)]
pub struct WarpCopyModel {
    pub config: DenoiserConfig,
}

impl ChunkDenoiser for WarpCopyModel {
    fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn encode(&self, block: &LatentBlock, _tag: usize) -> Result<KvEntry> {
        block.check(&self.config)?;
        let m = Mat::zeros(self.config.tokens(), self.config.width);
        Ok(KvEntry {
            keys: vec![m.clone(); self.config.layers],
            values: vec![m; self.config.layers],
            chunk_index: block.chunk_index,
            kind: block.kind,
            cursor: None,
        })
    }

    fn denoise(&self, noisy: &Mat, _sigma: f64, _cache: &StCache, geometry: &Mat, _tag: usize) -> Result<Mat> {
        if geometry.shape() != (noisy.rows(), self.config.geometry_dim()) {
            return Err(Error::Shape(format!("geometric condition is {:?}", geometry.shape())));
        }
        Ok(Mat::from_fn(noisy.rows(), noisy.cols(), |r, c| {
            let (pix, ch) = (c / 3, c % 3);
            let g = geometry.row(r);
            if g[pix * 4 + 3] > 0.5 {
                g[pix * 4 + ch]
            } else {
                -1.0
            }
        }))
    }
}

/// Run metadata stored next to `frames.bin` and `masks.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    pub scene_tag: usize,
    pub intrinsics: Intrinsics,
    #[serde(rename = "K")]
    pub chunk_len: usize,
    pub origin: PoseRecord,
    pub commands: Vec<InteractionCommand>,
    pub chunk_poses: Vec<PoseRecord>,
    pub chunk_coverage: Vec<f64>,
    pub frame_poses: Vec<PoseRecord>,
    pub frame_times: Vec<usize>,
    pub wall_seconds: f64,
}

/// A finished run in memory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub record: RunRecord,
    pub frames: Vec<Raster>,
    pub masks: Vec<Mask>,
}

impl RunData {
    /// Drive `session` through `commands`, timing the whole run.
    pub fn generate(session: &mut Session, commands: &[InteractionCommand]) -> Result<RunData> {
        let origin = *session.pose();
        let started = Instant::now();
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        let mut chunk_poses = Vec::new();
        let mut chunk_coverage = Vec::new();
        let mut frame_poses = Vec::new();
        let mut frame_times = Vec::new();
        for cmd in commands {
            let out = session.step(cmd)?;
            frames.extend(out.frames);
            masks.extend(out.masks);
            chunk_poses.push(PoseRecord::from(&out.pose));
            chunk_coverage.push(out.coverage);
            frame_poses.extend(out.frame_poses.iter().map(PoseRecord::from));
            frame_times.extend(out.frame_times);
        }
        let reference = session.reference();
        let record = RunRecord {
            episode: None,
            scene_seed: None,
            difficulty: None,
            scene_tag: reference.scene_tag,
            intrinsics: reference.intrinsics,
            chunk_len: reference.chunk_len,
            origin: PoseRecord::from(&origin),
            commands: commands.to_vec(),
            chunk_poses,
            chunk_coverage,
            frame_poses,
            frame_times,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        Ok(RunData { record, frames, masks })
    }

    pub fn frame_poses(&self) -> Result<Vec<Pose>> {
        self.record.frame_poses.iter().map(PoseRecord::to_pose).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join("run.json");
        let json = serde_json::to_vec_pretty(&self.record).map_err(Error::json(&path))?;
        fs::write(&path, json).map_err(Error::io(&path))?;
        let fpath = dir.join("frames.bin");
        let bytes: Vec<u8> = self.frames.iter().flat_map(|f| f.data.iter().flat_map(|v| v.to_le_bytes())).collect();
        fs::write(&fpath, bytes).map_err(Error::io(&fpath))?;
        let mpath = dir.join("masks.bin");
        let bytes: Vec<u8> = self.masks.iter().flat_map(|m| m.data.iter().map(|&b| u8::from(b))).collect();
        fs::write(&mpath, bytes).map_err(Error::io(&mpath))
    }

    pub fn load(dir: &Path) -> Result<RunData> {
        let path = dir.join("run.json");
        let text = fs::read(&path).map_err(Error::io(&path))?;
        let record: RunRecord = serde_json::from_slice(&text).map_err(Error::json(&path))?;
        let (h, w) = (record.intrinsics.height, record.intrinsics.width);
        let n = record.frame_poses.len();
        let fpath = dir.join("frames.bin");
        let bytes = fs::read(&fpath).map_err(Error::io(&fpath))?;
        if bytes.len() != n * h * w * 3 * 4 {
            return Err(Error::Format { path: fpath, reason: format!("expected {} frames of {h}x{w}", n) });
        }
        let floats: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let frames = floats.chunks_exact(h * w * 3).map(|c| Raster::from_vec(h, w, 3, c.to_vec()).expect("sized")).collect();
        let mpath = dir.join("masks.bin");
        let bytes = fs::read(&mpath).map_err(Error::io(&mpath))?;
        if bytes.len() != n * h * w {
            return Err(Error::Format { path: mpath, reason: "mask count differs from frame count".into() });
        }
        let masks = bytes.chunks_exact(h * w).map(|c| Mask { height: h, width: w, data: c.iter().map(|&b| b != 0).collect() }).collect();
        Ok(RunData { record, frames, masks })
    }
}

/// PSNR over masked pixels of all frames, with pixel values in `[0, 1]`.
/// `None` when no pixel is masked; [`PSNR_CAP`] for an exact match.
pub fn masked_psnr(frames: &[Raster], truth: &[Raster], masks: &[Mask]) -> Option<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for ((f, t), m) in frames.iter().zip(truth).zip(masks) {
        for (i, &on) in m.data.iter().enumerate() {
            if on {
                for c in 0..3 {
                    let d = f.data[i * 3 + c] as f64 - t.data[i * 3 + c] as f64;
                    se += d * d;
                }
                n += 3;
            }
        }
    }
    (n > 0).then(|| if se == 0.0 { PSNR_CAP } else { (10.0 * (n as f64 / se).log10()).min(PSNR_CAP) })
}

/// Oracle renders along the run's frame poses and times.
pub fn oracle_frames(scene: &SceneSpec, k: &Intrinsics, poses: &[Pose], times: &[usize]) -> Vec<Raster> {
    poses.iter().zip(times).map(|(p, &t)| render(scene, p, k, t).0).collect()
}

/// Copy-last-frame baseline: every frame of chunk `i` repeats the true view
/// at the end of chunk `i − 1`; chunk 0 repeats the origin view.
pub fn copy_last_frame_baseline(
    scene: &SceneSpec,
    k: &Intrinsics,
    origin: &Pose,
    frame_poses: &[Pose],
    frame_times: &[usize],
    chunk_len: usize,
) -> Vec<Raster> {
    let first = render(scene, origin, k, frame_times.first().copied().unwrap_or(0)).0;
    let mut out = Vec::with_capacity(frame_poses.len());
    let mut held = first;
    for (c, (poses, times)) in frame_poses.chunks(chunk_len).zip(frame_times.chunks(chunk_len)).enumerate() {
        if c > 0 {
            let j = c * chunk_len - 1;
            held = render(scene, &frame_poses[j], k, frame_times[j]).0;
        }
        out.extend(std::iter::repeat_n(held.clone(), poses.len()));
        debug_assert_eq!(poses.len(), times.len());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when no pixel was covered by the warp.
    pub masked_psnr: Option<f64>,
    pub coverage: f64,
    pub trajectory_error: TrajectoryError,
    pub chunks: usize,
    pub chunks_per_sec: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_psnr: Option<f64>,
}

/// Score a run against oracle renders of `scene`.
///
/// Poses are the session's command fold; `scripted` is the trajectory the
/// script was meant to produce, from the same origin.
pub fn evaluate_run(run: &RunData, scene: &SceneSpec, scripted: &[Pose]) -> Result<EvalReport> {
    let poses = run.frame_poses()?;
    let n = run.frames.len();
    if poses.len() != n || run.masks.len() != n || run.record.frame_times.len() != n || scripted.len() != n {
        return Err(Error::Invalid(format!(
            "run has {n} frames, {} poses, {} masks, {} times; script has {} poses",
            poses.len(),
            run.masks.len(),
            run.record.frame_times.len(),
            scripted.len()
        )));
    }
    let k = &run.record.intrinsics;
    let truth = oracle_frames(scene, k, &poses, &run.record.frame_times);
    let origin = run.record.origin.to_pose()?;
    let baseline = copy_last_frame_baseline(scene, k, &origin, &poses, &run.record.frame_times, run.record.chunk_len);
    let chunks = run.record.commands.len();
    let coverage = run.masks.iter().map(Mask::coverage).sum::<f64>() / n.max(1) as f64;
    Ok(EvalReport {
        masked_psnr: masked_psnr(&run.frames, &truth, &run.masks),
        coverage,
        trajectory_error: trajectory_error(&poses, scripted)?,
        chunks,
        chunks_per_sec: chunks as f64 / run.record.wall_seconds.max(1e-9),
        baseline_psnr: masked_psnr(&baseline, &truth, &run.masks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CommandKind;
    use crate::microworld::{build_scene, generate_episode, trajectory_from_commands};

    fn setup(difficulty: Difficulty, chunks: usize) -> (SceneSpec, Arc<Episode>, DenoiserConfig) {
        let cfg = DenoiserConfig { frame_height: 16, frame_width: 16, patch: 4, chunk_len: 2, width: 8, heads: 2, ..Default::default() };
        let scene = build_scene(21, difficulty);
        let k = Intrinsics::from_fov(16, 16, 70.0);
        let path = trajectory_from_commands(&Pose::identity(), &vec![InteractionCommand::stop(); chunks], 2);
        (scene.clone(), Arc::new(generate_episode(&scene, &path, &k, 2).unwrap()), cfg)
    }

    #[test]
    fn reference_selection_clamps() {
        let (_, ep, _) = setup(Difficulty::Static, 3);
        assert_eq!(select_reference(&ep, 0, false).unwrap(), 0);
        assert_eq!(select_reference(&ep, 10, false).unwrap(), 2);
        assert!(matches!(select_reference(&ep, 3, true), Err(Error::ReferenceExhausted(3))));
        let picks: Vec<_> = (0..8).map(|i| select_reference(&ep, i, false).unwrap()).collect();
        assert!(picks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn stop_with_warp_copy_reproduces_reference() {
        let (_, ep, cfg) = setup(Difficulty::Static, 2);
        let model = Arc::new(WarpCopyModel { config: cfg });
        let mut s = Session::new(model, ep.clone(), SessionConfig::default()).unwrap();
        let out = s.step(&InteractionCommand::stop()).unwrap();
        for (k, (f, m)) in out.frames.iter().zip(&out.masks).enumerate() {
            // Every pixel with reference depth is covered; sky has none.
            assert_eq!(*m, ep.depths[k].validity());
            for i in 0..m.data.len() {
                for c in 0..3 {
                    let want = if m.data[i] { ep.frames[k].data[i * 3 + c] } else { 0.0 };
                    assert!((f.data[i * 3 + c] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cache_stays_bounded_over_long_runs() {
        let (_, ep, cfg) = setup(Difficulty::Static, 2);
        let w = cfg.history_window;
        let mut s = Session::new(Arc::new(WarpCopyModel { config: cfg }), ep, SessionConfig::default()).unwrap();
        for _ in 0..100 {
            s.step(&InteractionCommand::new(CommandKind::YawLeft, 3.0).unwrap()).unwrap();
            assert_eq!(s.cache().entries_per_layer(), vec![w + 1; s.cache().layers()]);
        }
        assert_eq!(s.chunk_index(), 100);
    }

    #[test]
    fn square_loop_closes() {
        let (_, ep, cfg) = setup(Difficulty::Static, 1);
        let mut s = Session::new(Arc::new(WarpCopyModel { config: cfg }), ep, SessionConfig::default()).unwrap();
        for _ in 0..4 {
            s.step(&InteractionCommand::new(CommandKind::MoveForward, 0.5).unwrap()).unwrap();
            s.step(&InteractionCommand::new(CommandKind::YawRight, 90.0).unwrap()).unwrap();
        }
        let d = s.pose().to_matrix4() - Pose::identity().to_matrix4();
        assert!(d.abs().max() < 1e-9, "{d}");
    }

    #[test]
    fn memory_is_gated_and_bounded() {
        let (scene, ep, cfg) = setup(Difficulty::Static, 1);
        let depth: Arc<dyn DepthSource> = Arc::new(SceneDepth { scene, intrinsics: ep.intrinsics });
        let model: Arc<dyn ChunkDenoiser> = Arc::new(WarpCopyModel { config: cfg });
        let mut off = Session::new(model.clone(), ep.clone(), SessionConfig::default()).unwrap().with_depth_source(depth.clone());
        off.step(&InteractionCommand::stop()).unwrap();
        assert!(off.memory().is_none());
        let cfg_on = SessionConfig { memory_budget: Some(300), ..Default::default() };
        let mut on = Session::new(model, ep, cfg_on).unwrap().with_depth_source(depth);
        for i in 0..40 {
            on.step(&InteractionCommand::new(CommandKind::YawLeft, 9.0).unwrap()).unwrap();
            let mem = on.memory().unwrap();
            assert!(mem.len() <= 300);
            assert!(mem.oldest_chunk().unwrap() <= i);
        }
        assert_eq!(on.memory().unwrap().len(), 300);
    }

    #[test]
    fn latest_command_wins() {
        let (_, ep, cfg) = setup(Difficulty::Static, 1);
        let mut s = Session::new(Arc::new(WarpCopyModel { config: cfg }), ep, SessionConfig::default()).unwrap();
        s.push_command(InteractionCommand::new(CommandKind::YawLeft, 30.0).unwrap());
        s.push_command(InteractionCommand::new(CommandKind::MoveForward, 1.0).unwrap());
        let out = s.step_pending().unwrap();
        assert!((out.pose.translation().z - 1.0).abs() < 1e-12);
        let idle = s.step_pending().unwrap();
        assert_eq!(idle.pose, out.pose);
    }

    #[test]
    fn perfect_output_scores_cap_and_run_files_round_trip() {
        let (scene, ep, cfg) = setup(Difficulty::Dynamic, 2);
        let mut s = Session::new(Arc::new(WarpCopyModel { config: cfg }), ep.clone(), SessionConfig::default()).unwrap();
        let cmds = vec![InteractionCommand::new(CommandKind::StrafeLeft, 0.2).unwrap(); 3];
        let mut run = RunData::generate(&mut s, &cmds).unwrap();
        let poses = run.frame_poses().unwrap();
        run.frames = oracle_frames(&scene, &ep.intrinsics, &poses, &run.record.frame_times);
        let scripted = trajectory_from_commands(&ep.poses[0], &cmds, 2);
        let report = evaluate_run(&run, &scene, &scripted).unwrap();
        assert_eq!(report.masked_psnr, Some(PSNR_CAP));
        assert!(report.chunks_per_sec > 0.0);
        assert!(report.trajectory_error.rot_deg < 1e-9 && report.trajectory_error.trans < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let back = RunData::load(dir.path()).unwrap();
        assert_eq!(back.frames, run.frames);
        assert_eq!(back.masks, run.masks);
        assert_eq!(back.record, run.record);
        assert!(evaluate_run(&back, &scene, &scripted[..2]).is_err());
    }
}
