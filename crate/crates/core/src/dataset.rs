//! Episode directories on disk and paired training samples.
//!
//! An episode directory holds `meta.json`, `frames.bin` and `depths.bin`. The
//! binary files are contiguous little-endian `f32` rasters, row-major and
//! frame-major; invalid depth is stored as `0`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CommandKind, DepthMap, InteractionCommand, Intrinsics, Pose};
use crate::microworld::{build_scene, generate_episode_at, trajectory_from_commands, Difficulty, Episode, SceneSpec};
use crate::raster::Raster;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    /// `[w, x, y, z]`
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let (quaternion, translation) = p.to_quaternion();
        Self { quaternion, translation }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose> {
        Pose::from_quaternion(self.quaternion, self.translation)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub intrinsics: Intrinsics,
    pub poses: Vec<PoseRecord>,
    pub scene_tag: usize,
    pub frame_count: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Scene seed, when the episode came from the micro-world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    #[serde(default)]
    pub time_offset: usize,
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(Error::io(path))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format { path: path.into(), reason: format!("expected {} bytes, found {}", expected * 4, bytes.len()) });
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Write `episode` into `dir`, creating it if needed.
pub fn save_episode(episode: &Episode, dir: &Path, origin: Option<(u64, Difficulty)>) -> Result<()> {
    episode.validate()?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let meta = EpisodeMeta {
        intrinsics: episode.intrinsics,
        poses: episode.poses.iter().map(PoseRecord::from).collect(),
        scene_tag: episode.scene_tag,
        frame_count: episode.frame_count,
        k: episode.chunk_len,
        seed: origin.map(|o| o.0),
        difficulty: origin.map(|o| o.1),
        time_offset: episode.time_offset,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_vec_pretty(&meta).map_err(Error::json(&meta_path))?;
    fs::write(&meta_path, json).map_err(Error::io(&meta_path))?;
    write_f32s(&dir.join("frames.bin"), episode.frames.iter().flat_map(|f| f.data.iter().copied()))?;
    write_f32s(
        &dir.join("depths.bin"),
        episode.depths.iter().flat_map(|d| d.values.iter().zip(&d.valid).map(|(&v, &ok)| if ok { v } else { 0.0 })),
    )
}

pub fn load_meta(dir: &Path) -> Result<EpisodeMeta> {
    let path = dir.join("meta.json");
    let text = fs::read(&path).map_err(Error::io(&path))?;
    serde_json::from_slice(&text).map_err(Error::json(&path))
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let meta = load_meta(dir)?;
    let k = meta.intrinsics;
    k.validate()?;
    let (h, w, n) = (k.height, k.width, meta.frame_count);
    let frames_raw = read_f32s(&dir.join("frames.bin"), n * h * w * 3)?;
    let depths_raw = read_f32s(&dir.join("depths.bin"), n * h * w)?;
    let frames = frames_raw.chunks_exact(h * w * 3).map(|c| Raster::from_vec(h, w, 3, c.to_vec()).expect("sized")).collect();
    let depths = depths_raw
        .chunks_exact(h * w)
        .map(|c| {
            let mut d = DepthMap::new(h, w);
            for (i, &v) in c.iter().enumerate() {
                d.set(i / w, i % w, v);
            }
            d
        })
        .collect();
    let poses = meta.poses.iter().map(PoseRecord::to_pose).collect::<Result<Vec<_>>>()?;
    let ep = Episode {
        frames,
        depths,
        poses,
        intrinsics: k,
        scene_tag: meta.scene_tag,
        frame_count: n,
        chunk_len: meta.k,
        time_offset: meta.time_offset,
    };
    ep.validate().map_err(|e| Error::Format { path: dir.into(), reason: e.to_string() })?;
    Ok(ep)
}

/// Episode directories directly under `root`, sorted by name.
pub fn list_episode_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// A reference clip and a second clip of the same scene along a different
/// camera path. The target path starts from the reference's first pose and
/// both clips share frame times.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub scene: SceneSpec,
    pub reference: Episode,
    pub target: Episode,
    /// Commands that generated the target path, one per chunk.
    pub commands: Vec<InteractionCommand>,
}

/// Write `pair` as `reference/`, `target/` and `commands.json` under `dir`.
pub fn save_pair(pair: &TrainingPair, dir: &Path, seed: u64, difficulty: Difficulty) -> Result<()> {
    save_episode(&pair.reference, &dir.join("reference"), Some((seed, difficulty)))?;
    save_episode(&pair.target, &dir.join("target"), Some((seed, difficulty)))?;
    let path = dir.join("commands.json");
    let json = serde_json::to_vec_pretty(&pair.commands).map_err(Error::json(&path))?;
    fs::write(&path, json).map_err(Error::io(&path))
}

/// Read a pair written by [`save_pair`]; the scene is rebuilt from the
/// recorded seed and difficulty.
pub fn load_pair(dir: &Path) -> Result<TrainingPair> {
    let reference = load_episode(&dir.join("reference"))?;
    let target = load_episode(&dir.join("target"))?;
    let meta = load_meta(&dir.join("reference"))?;
    let (Some(seed), Some(difficulty)) = (meta.seed, meta.difficulty) else {
        return Err(Error::Format { path: dir.into(), reason: "pair has no scene seed".into() });
    };
    let path = dir.join("commands.json");
    let text = fs::read(&path).map_err(Error::io(&path))?;
    let commands: Vec<InteractionCommand> = serde_json::from_slice(&text).map_err(Error::json(&path))?;
    if commands.len() != target.chunk_count() {
        return Err(Error::Format { path, reason: format!("{} commands for {} chunks", commands.len(), target.chunk_count()) });
    }
    Ok(TrainingPair { scene: build_scene(seed, difficulty), reference, target, commands })
}

/// Every pair directory directly under `root`, sorted by name.
pub fn load_pairs(root: &Path) -> Result<Vec<TrainingPair>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("commands.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_pair(d)).collect()
}

/// Parameters for procedurally drawn trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStyle {
    pub translation: f64,
    pub rotation_deg: f64,
}

impl Default for TrajectoryStyle {
    fn default() -> Self {
        Self { translation: 0.3, rotation_deg: 6.0 }
    }
}

/// Reference clip: a slow forward dolly.
pub fn reference_commands(chunks: usize, style: &TrajectoryStyle) -> Vec<InteractionCommand> {
    vec![InteractionCommand { kind: CommandKind::MoveForward, magnitude: style.translation * 0.25 }; chunks]
}

/// A random command script of `chunks` commands.
pub fn random_commands(rng: &mut impl rand::Rng, chunks: usize, style: &TrajectoryStyle) -> Vec<InteractionCommand> {
    const KINDS: [CommandKind; 8] = [
        CommandKind::MoveForward,
        CommandKind::MoveBack,
        CommandKind::StrafeLeft,
        CommandKind::StrafeRight,
        CommandKind::YawLeft,
        CommandKind::YawRight,
        CommandKind::Stop,
        CommandKind::MoveForward,
    ];
    (0..chunks)
        .map(|_| {
            let kind = KINDS[rng.random_range(0..KINDS.len())];
            let magnitude = match kind {
                CommandKind::Stop => 0.0,
                k if k.is_rotation() => style.rotation_deg * rng.random_range(0.5..1.0),
                _ => style.translation * rng.random_range(0.5..1.0),
            };
            InteractionCommand { kind, magnitude }
        })
        .collect()
}

/// Translation-only script: a strafe or dolly that the copy-last-frame
/// baseline cannot follow.
pub fn translating_commands(rng: &mut impl rand::Rng, chunks: usize, style: &TrajectoryStyle) -> Vec<InteractionCommand> {
    const KINDS: [CommandKind; 4] =
        [CommandKind::StrafeLeft, CommandKind::StrafeRight, CommandKind::MoveForward, CommandKind::MoveBack];
    let kind = KINDS[rng.random_range(0..KINDS.len())];
    (0..chunks)
        .map(|_| InteractionCommand { kind, magnitude: style.translation * rng.random_range(0.7..1.0) })
        .collect()
}

/// Render a reference/target pair for scene `seed`.
pub fn make_pair(
    seed: u64,
    difficulty: Difficulty,
    k: &Intrinsics,
    chunk_len: usize,
    chunks: usize,
    style: &TrajectoryStyle,
) -> Result<TrainingPair> {
    use rand::SeedableRng;
    let scene = build_scene(seed, difficulty);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(11));
    let reference_path = trajectory_from_commands(&Pose::identity(), &reference_commands(chunks, style), chunk_len);
    let reference = generate_episode_at(&scene, &reference_path, k, chunk_len, 0)?;
    // Sessions start at the reference's first camera pose.
    let commands = random_commands(&mut rng, chunks, style);
    let target_path = trajectory_from_commands(&reference.poses[0], &commands, chunk_len);
    let target = generate_episode_at(&scene, &target_path, k, chunk_len, 0)?;
    Ok(TrainingPair { scene, reference, target, commands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{build_scene, generate_episode};

    #[test]
    fn pair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = Intrinsics::from_fov(16, 16, 70.0);
        let pair = make_pair(7, Difficulty::Dynamic, &k, 2, 2, &TrajectoryStyle::default()).unwrap();
        save_pair(&pair, &dir.path().join("p7"), 7, Difficulty::Dynamic).unwrap();
        let back = load_pairs(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].target.frames, pair.target.frames);
        assert_eq!(back[0].commands, pair.commands);
        assert_eq!(back[0].scene, pair.scene);
        assert!(load_pairs(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn episode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = build_scene(4, Difficulty::Dynamic);
        let k = Intrinsics::from_fov(16, 16, 70.0);
        let path = trajectory_from_commands(
            &Pose::identity(),
            &[InteractionCommand::new(CommandKind::YawLeft, 15.0).unwrap(), InteractionCommand::stop()],
            2,
        );
        let ep = generate_episode(&scene, &path, &k, 2).unwrap();
        save_episode(&ep, dir.path(), Some((4, Difficulty::Dynamic))).unwrap();
        let back = load_episode(dir.path()).unwrap();
        assert_eq!(back.frames, ep.frames);
        assert_eq!(back.depths, ep.depths);
        for (a, b) in back.poses.iter().zip(&ep.poses) {
            assert!((a.to_matrix4() - b.to_matrix4()).abs().max() < 1e-12);
        }
        let meta = load_meta(dir.path()).unwrap();
        assert_eq!((meta.seed, meta.difficulty, meta.k), (Some(4), Some(Difficulty::Dynamic), 2));
        let raw = std::fs::read_to_string(dir.path().join("meta.json")).unwrap();
        assert!(raw.contains("\"K\": 2"));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scene = build_scene(4, Difficulty::Static);
        let k = Intrinsics::from_fov(8, 8, 70.0);
        let ep = generate_episode(&scene, &[Pose::identity(); 2], &k, 2).unwrap();
        save_episode(&ep, dir.path(), None).unwrap();
        std::fs::write(dir.path().join("frames.bin"), [0u8; 12]).unwrap();
        assert!(matches!(load_episode(dir.path()), Err(Error::Format { .. })));
    }
}
