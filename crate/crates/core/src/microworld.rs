//! Procedural toy scenes and an exact ray-casting renderer.
//!
//! World frame: +y points down (gravity) like the camera frame, the ground is
//! the plane `y = GROUND_Y`, and the identity camera pose sits one unit above
//! the ground looking along +z.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{accumulate, command_to_delta, DepthMap, InteractionCommand, Intrinsics, Pose};
use crate::raster::Raster;

pub const GROUND_Y: f64 = 1.0;
pub const SKY_COLOR: [f32; 3] = [0.55, 0.75, 0.95];
/// Number of distinct scene tags (palettes).
pub const TAG_COUNT: usize = 4;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_CHUNK: usize = 4;

/// Colour palettes indexed by scene tag: (ground a, ground b, box base, mover).
const PALETTES: [([f32; 3], [f32; 3], [f32; 3], [f32; 3]); TAG_COUNT] = [
    ([0.85, 0.75, 0.50], [0.60, 0.45, 0.25], [0.80, 0.30, 0.20], [0.95, 0.90, 0.20]),
    ([0.30, 0.60, 0.25], [0.15, 0.35, 0.12], [0.45, 0.30, 0.20], [0.90, 0.20, 0.60]),
    ([0.92, 0.94, 0.97], [0.70, 0.75, 0.85], [0.25, 0.45, 0.75], [0.95, 0.40, 0.10]),
    ([0.25, 0.25, 0.35], [0.08, 0.08, 0.14], [0.60, 0.60, 0.70], [0.20, 0.90, 0.90]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Static,
    Dynamic,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::Invalid(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTexture {
    /// Checker cell size in world units.
    pub period: f64,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    pub center: [f64; 3],
    /// Displacement per frame.
    pub velocity: [f64; 3],
    pub radius: f64,
    pub color: [f32; 3],
}

impl Mover {
    pub fn center_at(&self, t: usize) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.velocity) * t as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub ground: GroundTexture,
    pub boxes: Vec<BoxObject>,
    pub mover: Mover,
    pub scene_tag: usize,
}

fn jitter(rng: &mut ChaCha8Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Deterministic scene for `seed`. Static scenes have a motionless mover.
pub fn build_scene(seed: u64, difficulty: Difficulty) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_e5ce_0000_0001);
    let scene_tag = rng.random_range(0..TAG_COUNT);
    let (ga, gb, box_base, mover_color) = PALETTES[scene_tag];
    let ground = GroundTexture { period: rng.random_range(0.6..1.2), color_a: ga, color_b: gb };
    let n_boxes = rng.random_range(3..=6);
    let boxes = (0..n_boxes)
        .map(|_| {
            let size = [rng.random_range(0.5..1.6), rng.random_range(0.4..1.5), rng.random_range(0.5..1.6)];
            let center = [rng.random_range(-4.0..4.0), GROUND_Y - size[1] / 2.0, rng.random_range(3.0..10.0)];
            BoxObject { center, size, color: jitter(&mut rng, box_base, 0.15) }
        })
        .collect();
    let radius = rng.random_range(0.3..0.6);
    let center = [rng.random_range(-2.0..2.0), GROUND_Y - radius, rng.random_range(3.5..7.0)];
    let velocity = match difficulty {
        Difficulty::Static => [0.0; 3],
        Difficulty::Dynamic => [rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05)],
    };
    SceneSpec { seed, ground, boxes, mover: Mover { center, velocity, radius, color: mover_color }, scene_tag }
}

struct Hit {
    dist: f64,
    color: [f32; 3],
}

fn shade(c: [f32; 3], f: f32) -> [f32; 3] {
    c.map(|v| (v * f).clamp(0.0, 1.0))
}

/// Ray/AABB slab test; returns entry parameter and the hit face axis.
fn hit_box(o: &Vector3<f64>, d: &Vector3<f64>, b: &BoxObject) -> Option<(f64, usize, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for a in 0..3 {
        let lo = b.center[a] - b.size[a] / 2.0;
        let hi = b.center[a] + b.size[a] / 2.0;
        if d[a].abs() < 1e-15 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        let mut s = -d[a].signum();
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            s = -s;
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
            sign = s;
        }
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 1e-9).then_some((t0, axis, sign))
}

fn hit_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t > 1e-9).then_some(t)
}

impl SceneSpec {
    /// Nearest hit along `o + s·d`, with `s` the ray parameter.
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |dist: f64, color: [f32; 3]| {
            if best.as_ref().is_none_or(|b| dist < b.dist) {
                best = Some(Hit { dist, color });
            }
        };
        if d.y > 1e-12 {
            let s = (GROUND_Y - o.y) / d.y;
            if s > 1e-9 {
                let p = o + d * s;
                let cell = (p.x / self.ground.period).floor() as i64 + (p.z / self.ground.period).floor() as i64;
                consider(s, if cell.rem_euclid(2) == 0 { self.ground.color_a } else { self.ground.color_b });
            }
        }
        for b in &self.boxes {
            if let Some((s, axis, sign)) = hit_box(o, d, b) {
                // Flat per-face shading: tops brightest.
                let f = match (axis, sign > 0.0) {
                    (1, false) => 1.0,
                    (1, true) => 0.5,
                    (0, _) => 0.8,
                    _ => 0.65,
                };
                consider(s, shade(b.color, f));
            }
        }
        if let Some(s) = hit_sphere(o, d, &self.mover.center_at(t), self.mover.radius) {
            consider(s, self.mover.color);
        }
        best
    }
}

/// Ray-cast `scene` from camera pose `pose` (camera-to-world) at frame `t`.
/// Depth is the hit distance along the camera z axis; misses are invalid
/// depth and sky colour.
pub fn render(scene: &SceneSpec, pose: &Pose, k: &Intrinsics, t: usize) -> (Raster, DepthMap) {
    let mut frame = Raster::zeros(k.height, k.width, 3);
    let mut depth = DepthMap::new(k.height, k.width);
    let origin = *pose.translation();
    for y in 0..k.height {
        for x in 0..k.width {
            // Camera ray has unit z, so the ray parameter equals camera depth.
            let d = pose.rotation() * k.ray(x as f64, y as f64);
            match scene.trace(&origin, &d, t) {
                Some(hit) => {
                    frame.pixel_mut(y, x).copy_from_slice(&hit.color);
                    depth.set(y, x, hit.dist as f32);
                }
                None => frame.pixel_mut(y, x).copy_from_slice(&SKY_COLOR),
            }
        }
    }
    (frame, depth)
}

/// Rendered frames with their depths, poses and intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Raster>,
    pub depths: Vec<DepthMap>,
    /// Camera-to-world, one per frame.
    pub poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub scene_tag: usize,
    pub frame_count: usize,
    /// Frames per chunk.
    pub chunk_len: usize,
    /// Frame index of the first frame, used for dynamic scene time.
    pub time_offset: usize,
}

impl Episode {
    pub fn chunk_count(&self) -> usize {
        self.frame_count / self.chunk_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.frame_count || self.depths.len() != self.frame_count || self.poses.len() != self.frame_count {
            return Err(Error::Invalid("episode arrays disagree with frame_count".into()));
        }
        if self.chunk_len == 0 || self.frame_count % self.chunk_len != 0 {
            return Err(Error::Invalid(format!("frame_count {} is not a multiple of K={}", self.frame_count, self.chunk_len)));
        }
        self.intrinsics.validate()
    }
}

/// Render one frame per trajectory pose; frame `j` is at time `time_offset + j`.
pub fn generate_episode(scene: &SceneSpec, trajectory: &[Pose], k: &Intrinsics, chunk_len: usize) -> Result<Episode> {
    generate_episode_at(scene, trajectory, k, chunk_len, 0)
}

pub fn generate_episode_at(
    scene: &SceneSpec,
    trajectory: &[Pose],
    k: &Intrinsics,
    chunk_len: usize,
    time_offset: usize,
) -> Result<Episode> {
    if chunk_len == 0 || trajectory.is_empty() || trajectory.len() % chunk_len != 0 {
        return Err(Error::Invalid(format!("trajectory length {} is not a positive multiple of K={chunk_len}", trajectory.len())));
    }
    let (frames, depths) = trajectory.iter().enumerate().map(|(j, p)| render(scene, p, k, time_offset + j)).unzip();
    Ok(Episode {
        frames,
        depths,
        poses: trajectory.to_vec(),
        intrinsics: *k,
        scene_tag: scene.scene_tag,
        frame_count: trajectory.len(),
        chunk_len,
        time_offset,
    })
}

/// Per-frame camera poses for a command script: each command is spread
/// evenly over the `chunk_len` frames of its chunk, and the chunk's final
/// frame lands exactly on the accumulated pose.
pub fn trajectory_from_commands(start: &Pose, commands: &[InteractionCommand], chunk_len: usize) -> Vec<Pose> {
    let mut out = Vec::with_capacity(commands.len() * chunk_len);
    let mut pose = *start;
    for cmd in commands {
        out.extend(chunk_frame_poses(&pose, cmd, chunk_len));
        pose = accumulate(&pose, &command_to_delta(cmd));
    }
    out
}

/// Frame poses of one chunk that starts at `prev` and executes `cmd`.
pub fn chunk_frame_poses(prev: &Pose, cmd: &InteractionCommand, chunk_len: usize) -> Vec<Pose> {
    (1..=chunk_len)
        .map(|f| {
            if f == chunk_len {
                accumulate(prev, &command_to_delta(cmd))
            } else {
                accumulate(prev, &command_to_delta(&cmd.scaled(f as f64 / chunk_len as f64)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CommandKind;

    fn k64() -> Intrinsics {
        Intrinsics::from_fov(32, 32, 70.0)
    }

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(build_scene(7, Difficulty::Static), build_scene(7, Difficulty::Static));
        assert_eq!(build_scene(7, Difficulty::Static).mover.velocity, [0.0; 3]);
        let (a, b) = (build_scene(7, Difficulty::Dynamic), build_scene(8, Difficulty::Dynamic));
        assert!(a.boxes.iter().zip(&b.boxes).any(|(x, y)| x.center != y.center) || a.boxes.len() != b.boxes.len());
        for s in 0..50 {
            let sc = build_scene(s, Difficulty::Dynamic);
            assert!(sc.boxes.iter().all(|b| b.size.iter().all(|&v| v > 0.0)));
            assert!(sc.mover.radius > 0.0);
            assert!(sc.scene_tag < TAG_COUNT);
        }
    }

    #[test]
    fn looking_down_sees_constant_plane_depth() {
        let mut scene = build_scene(1, Difficulty::Static);
        scene.boxes.clear();
        scene.mover.center = [100.0, 0.0, 100.0];
        let h = 2.5;
        // Camera at height h above the ground, optical axis pointing down (+y).
        let pose = crate::geometry::compose(
            &Pose::from_translation(Vector3::new(0.0, GROUND_Y - h, 0.0)),
            &Pose::pitch_deg(-90.0),
        );
        let k = k64();
        let (_, depth) = render(&scene, &pose, &k, 0);
        let theta_max = ((k.width as f64 / 2.0).hypot(k.height as f64 / 2.0) / k.fx).atan();
        assert_eq!(depth.valid_count(), k.width * k.height);
        for &d in &depth.values {
            let d = d as f64;
            assert!(d >= h - 1e-5 && d <= h / theta_max.cos() + 1e-5, "depth {d}");
        }
    }

    #[test]
    fn sky_only_view() {
        let scene = build_scene(3, Difficulty::Static);
        let (frame, depth) = render(&scene, &Pose::pitch_deg(80.0), &k64(), 0);
        assert_eq!(depth.valid_count(), 0);
        assert!(frame.data.chunks(3).all(|p| p == SKY_COLOR));
    }

    #[test]
    fn static_scene_is_time_invariant() {
        let scene = build_scene(5, Difficulty::Static);
        let k = k64();
        assert_eq!(render(&scene, &Pose::identity(), &k, 0), render(&scene, &Pose::identity(), &k, 1));
    }

    #[test]
    fn episodes() {
        let scene = build_scene(2, Difficulty::Static);
        let k = k64();
        let ep = generate_episode(&scene, &[Pose::identity(); 4], &k, 4).unwrap();
        assert_eq!(ep.frame_count, 4);
        assert!(ep.frames.iter().all(|f| *f == ep.frames[0]));
        ep.validate().unwrap();
        assert!(generate_episode(&scene, &[Pose::identity(); 6], &k, 4).is_err());
    }

    #[test]
    fn chunk_poses_end_on_accumulated_pose() {
        let cmd = InteractionCommand::new(CommandKind::YawLeft, 20.0).unwrap();
        let poses = chunk_frame_poses(&Pose::identity(), &cmd, 4);
        assert_eq!(poses[3], accumulate(&Pose::identity(), &command_to_delta(&cmd)));
        assert!((poses[1].rotation_angle_deg_to(&Pose::identity()) - 10.0).abs() < 1e-9);
    }
}
