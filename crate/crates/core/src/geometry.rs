//! Rigid-body poses, interaction commands and depth-based reprojection.
//!
//! Camera convention: right-handed with +x right, +y down and +z forward;
//! pixel `(0, 0)` is the top-left corner and pixel `(u, v)` has its centre at
//! image coordinates `(u, v)`. A [`Pose`] used as a camera pose maps camera
//! coordinates to world coordinates.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

const ORTHO_TOL: f64 = 1e-6;

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validates that `rotation` is a proper rotation within `1e-6`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Invalid(format!("not a rotation: |RᵀR-I|={ortho:e}, det={det}")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_rotation(r: Rotation3<f64>) -> Self {
        Self { rotation: *r.matrix(), translation: Vector3::zeros() }
    }

    /// Rotation about the camera's y (down) axis; positive turns right.
    pub fn yaw_deg(deg: f64) -> Self {
        Self::from_rotation(Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()))
    }

    /// Rotation about the camera's x axis; positive looks up.
    pub fn pitch_deg(deg: f64) -> Self {
        Self::from_rotation(Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()))
    }

    pub fn from_quaternion(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let [w, x, y, z] = q;
        if !q.iter().chain(t.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let quat = nalgebra::Quaternion::new(w, x, y, z);
        if quat.norm() < 1e-12 {
            return Err(Error::Invalid("zero quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(quat);
        Ok(Self { rotation: *uq.to_rotation_matrix().matrix(), translation: Vector3::new(t[0], t[1], t[2]) })
    }

    /// `([w, x, y, z], [tx, ty, tz])`
    pub fn to_quaternion(&self) -> ([f64; 4], [f64; 3]) {
        let uq = UnitQuaternion::from_matrix(&self.rotation);
        let q = uq.quaternion();
        ([q.w, q.i, q.j, q.k], [self.translation.x, self.translation.y, self.translation.z])
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Geodesic angle between two rotations, in degrees.
    pub fn rotation_angle_deg_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    fn reorthonormalized(mut self) -> Self {
        let drift = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if drift > ORTHO_TOL {
            let uq = UnitQuaternion::from_matrix(&self.rotation);
            self.rotation = *uq.to_rotation_matrix().matrix();
        }
        self
    }
}

/// The pose equal to applying `b` then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose { rotation: a.rotation * b.rotation, translation: a.rotation * b.translation + a.translation }
        .reorthonormalized()
}

/// Advance a camera state by a camera-local delta: `T_i = T_{i-1} ∘ ΔT_i`.
pub fn accumulate(prev: &Pose, delta: &Pose) -> Pose {
    compose(prev, delta)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the given horizontal field of view, principal point at
    /// the image centre.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self { fx, fy: fx, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad intrinsics {self:?}")))
        }
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Sub-pixel projection of a camera-frame point with positive z.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Depth along camera z, with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; height * width], valid: vec![false; height * width] }
    }

    /// Constant-depth map, every pixel valid.
    pub fn constant(height: usize, width: usize, depth: f32) -> Self {
        Self { height, width, values: vec![depth; height * width], valid: vec![true; height * width] }
    }

    pub fn set(&mut self, y: usize, x: usize, depth: f32) {
        let i = y * self.width + x;
        self.values[i] = depth;
        self.valid[i] = depth > 0.0 && depth.is_finite();
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn validity(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.valid.clone() }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    MoveForward,
    MoveBack,
    StrafeLeft,
    StrafeRight,
    MoveUp,
    MoveDown,
    YawLeft,
    YawRight,
    PitchUp,
    PitchDown,
    Stop,
}

impl CommandKind {
    pub const ALL: [CommandKind; 11] = [
        CommandKind::MoveForward,
        CommandKind::MoveBack,
        CommandKind::StrafeLeft,
        CommandKind::StrafeRight,
        CommandKind::MoveUp,
        CommandKind::MoveDown,
        CommandKind::YawLeft,
        CommandKind::YawRight,
        CommandKind::PitchUp,
        CommandKind::PitchDown,
        CommandKind::Stop,
    ];

    pub fn is_rotation(self) -> bool {
        matches!(self, Self::YawLeft | Self::YawRight | Self::PitchUp | Self::PitchDown)
    }
}

/// One user instruction. Magnitudes are world units for translations and
/// degrees for rotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionCommand {
    pub kind: CommandKind,
    pub magnitude: f64,
}

impl InteractionCommand {
    pub fn new(kind: CommandKind, magnitude: f64) -> Result<Self> {
        let cmd = Self { kind, magnitude };
        cmd.validate()?;
        Ok(cmd)
    }

    pub fn stop() -> Self {
        Self { kind: CommandKind::Stop, magnitude: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::Invalid(format!("command magnitude {} must be finite and >= 0", self.magnitude)));
        }
        if self.kind == CommandKind::Stop && self.magnitude != 0.0 {
            return Err(Error::Invalid("stop carries magnitude 0".into()));
        }
        Ok(())
    }

    /// The same command with its magnitude multiplied by `s`; used to spread
    /// one command over the frames of a chunk.
    pub fn scaled(&self, s: f64) -> Self {
        Self { kind: self.kind, magnitude: self.magnitude * s }
    }
}

/// Default magnitudes for commands that arrive without one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub translation: f64,
    pub rotation_deg: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { translation: 0.25, rotation_deg: 10.0 }
    }
}

impl StepConfig {
    /// Build a command, filling a missing magnitude with the default step.
    pub fn command(&self, kind: CommandKind, magnitude: Option<f64>) -> Result<InteractionCommand> {
        let default = match kind {
            CommandKind::Stop => 0.0,
            k if k.is_rotation() => self.rotation_deg,
            _ => self.translation,
        };
        InteractionCommand::new(kind, magnitude.unwrap_or(default))
    }
}

/// Camera-local 6-DoF delta for one command.
pub fn command_to_delta(cmd: &InteractionCommand) -> Pose {
    let m = cmd.magnitude;
    let t = |x: f64, y: f64, z: f64| Pose::from_translation(Vector3::new(x, y, z));
    match cmd.kind {
        CommandKind::Stop => Pose::identity(),
        CommandKind::MoveForward => t(0.0, 0.0, m),
        CommandKind::MoveBack => t(0.0, 0.0, -m),
        CommandKind::StrafeLeft => t(-m, 0.0, 0.0),
        CommandKind::StrafeRight => t(m, 0.0, 0.0),
        CommandKind::MoveUp => t(0.0, -m, 0.0),
        CommandKind::MoveDown => t(0.0, m, 0.0),
        CommandKind::YawLeft => Pose::yaw_deg(-m),
        CommandKind::YawRight => Pose::yaw_deg(m),
        CommandKind::PitchUp => Pose::pitch_deg(m),
        CommandKind::PitchDown => Pose::pitch_deg(-m),
    }
}

/// Output of a forward warp.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub frame: Raster,
    pub mask: Mask,
    /// Z-buffer contents; `+∞` where nothing landed.
    pub depth: Vec<f32>,
}

impl WarpResult {
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self {
            frame: Raster::zeros(height, width, channels),
            mask: Mask::new(height, width, false),
            depth: vec![f32::INFINITY; height * width],
        }
    }

    pub fn coverage(&self) -> f64 {
        self.mask.coverage()
    }

    /// Splat one camera-frame point with colour into this buffer, keeping the
    /// nearest depth per pixel. Returns whether the point was written.
    pub fn splat(&mut self, k: &Intrinsics, p: &Vector3<f64>, color: &[f32]) -> bool {
        if !(p.z > 1e-9) || !p.iter().all(|v| v.is_finite()) {
            return false;
        }
        let (u, v) = k.project(p);
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.frame.width as f64 || v >= self.frame.height as f64 {
            return false;
        }
        let (x, y) = (u as usize, v as usize);
        let i = y * self.frame.width + x;
        let z = p.z as f32;
        if z < self.depth[i] {
            self.depth[i] = z;
            self.mask.data[i] = true;
            self.frame.pixel_mut(y, x).copy_from_slice(color);
            true
        } else {
            false
        }
    }
}

/// One world-space point with the colour it was observed with.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub color: [f32; 3],
}

/// Lift every valid depth pixel into world coordinates.
pub fn unproject(depth: &DepthMap, k: &Intrinsics, world_from_cam: &Pose) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(depth.valid_count());
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(d) = depth.get(y, x) {
                let p = k.ray(x as f64, y as f64) * d as f64;
                out.push(world_from_cam.transform_point(&p));
            }
        }
    }
    out
}

/// [`unproject`] with each point carrying its pixel colour (first three
/// channels of `frame`).
pub fn unproject_colored(frame: &Raster, depth: &DepthMap, k: &Intrinsics, world_from_cam: &Pose) -> Vec<CloudPoint> {
    let mut out = Vec::with_capacity(depth.valid_count());
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(d) = depth.get(y, x) {
                let p = k.ray(x as f64, y as f64) * d as f64;
                let px = frame.pixel(y, x);
                let color = [px[0], px.get(1).copied().unwrap_or(0.0), px.get(2).copied().unwrap_or(0.0)];
                out.push(CloudPoint { position: world_from_cam.transform_point(&p), color });
            }
        }
    }
    out
}

/// Forward-warp `frame` into the view related to it by `rel` (source camera
/// coordinates → target camera coordinates). Each valid source pixel is
/// splatted to its rounded target pixel with a nearest-depth z-buffer.
pub fn reproject(frame: &Raster, depth: &DepthMap, k: &Intrinsics, rel: &Pose) -> Result<WarpResult> {
    if frame.height != depth.height || frame.width != depth.width {
        return Err(Error::Shape(format!(
            "frame {}x{} vs depth {}x{}",
            frame.height, frame.width, depth.height, depth.width
        )));
    }
    if frame.height != k.height || frame.width != k.width {
        return Err(Error::Shape(format!("frame {}x{} vs intrinsics {}x{}", frame.height, frame.width, k.height, k.width)));
    }
    if !rel.is_finite() {
        return Err(Error::NonFinite("relative pose"));
    }
    let mut out = WarpResult::empty(frame.height, frame.width, frame.channels);
    for y in 0..frame.height {
        for x in 0..frame.width {
            if let Some(d) = depth.get(y, x) {
                let p = rel.transform_point(&(k.ray(x as f64, y as f64) * d as f64));
                out.splat(k, &p, frame.pixel(y, x));
            }
        }
    }
    Ok(out)
}

/// Relative transform taking source-camera coordinates to target-camera
/// coordinates, given both camera-to-world poses.
pub fn relative(target_world_from_cam: &Pose, source_world_from_cam: &Pose) -> Pose {
    compose(&target_world_from_cam.inverse(), source_world_from_cam)
}

/// Rotation and translation error between two trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub rot_deg: f64,
    pub trans: f64,
}

/// Mean geodesic rotation error (degrees) over raw rotations, and mean
/// translation error after expressing both trajectories relative to their
/// first pose and scaling so the reference's farthest excursion from its start
/// is 1.
pub fn trajectory_error(estimated: &[Pose], reference: &[Pose]) -> Result<TrajectoryError> {
    if estimated.is_empty() || estimated.len() != reference.len() {
        return Err(Error::Invalid(format!("trajectory lengths {} and {}", estimated.len(), reference.len())));
    }
    let n = estimated.len() as f64;
    let rot_deg = estimated.iter().zip(reference).map(|(e, r)| e.rotation_angle_deg_to(r)).sum::<f64>() / n;
    let align = |traj: &[Pose]| -> Vec<Vector3<f64>> {
        let inv0 = traj[0].inverse();
        traj.iter().map(|p| *compose(&inv0, p).translation()).collect()
    };
    let (est_t, ref_t) = (align(estimated), align(reference));
    let span = ref_t.iter().map(|t| t.norm()).fold(0.0, f64::max);
    let scale = if span > 1e-12 { 1.0 / span } else { 1.0 };
    let trans = est_t.iter().zip(&ref_t).map(|(e, r)| (e - r).norm() * scale).sum::<f64>() / n;
    Ok(TrajectoryError { rot_deg, trans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-5.0f64..5.0)).prop_map(|(aa, t)| {
            let r = Rotation3::from_scaled_axis(Vector3::new(aa[0], aa[1], aa[2]));
            Pose::new(*r.matrix(), Vector3::new(t[0], t[1], t[2])).unwrap()
        })
    }

    fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.rotation - b.rotation).abs().max() <= tol && (a.translation - b.translation).abs().max() <= tol
    }

    #[test]
    fn compose_identity_and_yaw() {
        let t = Pose::yaw_deg(33.0);
        assert!(close(&compose(&Pose::identity(), &t), &t, 0.0));
        assert!(close(&compose(&Pose::yaw_deg(90.0), &Pose::yaw_deg(90.0)), &Pose::yaw_deg(180.0), 1e-12));
    }

    #[test]
    fn stop_and_forward_deltas() {
        assert_eq!(command_to_delta(&InteractionCommand::stop()), Pose::identity());
        let d = command_to_delta(&InteractionCommand::new(CommandKind::MoveForward, 0.5).unwrap());
        assert_eq!(*d.translation(), Vector3::new(0.0, 0.0, 0.5));
        assert_eq!(*d.rotation(), Matrix3::identity());
    }

    #[test]
    fn yaw_pair_cancels() {
        let l = command_to_delta(&InteractionCommand::new(CommandKind::YawLeft, 30.0).unwrap());
        let r = command_to_delta(&InteractionCommand::new(CommandKind::YawRight, 30.0).unwrap());
        assert!(close(&compose(&l, &r), &Pose::identity(), 1e-9));
    }

    #[test]
    fn command_validation() {
        assert!(InteractionCommand::new(CommandKind::MoveForward, -1.0).is_err());
        assert!(InteractionCommand::new(CommandKind::Stop, 1.0).is_err());
        let s = StepConfig::default();
        assert_eq!(s.command(CommandKind::YawLeft, None).unwrap().magnitude, s.rotation_deg);
        assert_eq!(s.command(CommandKind::MoveUp, Some(2.0)).unwrap().magnitude, 2.0);
    }

    #[test]
    fn pose_validation_rejects_non_rotations() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity(), Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let p = compose(&Pose::yaw_deg(40.0), &Pose::pitch_deg(-15.0));
        let (q, t) = p.to_quaternion();
        assert!(close(&Pose::from_quaternion(q, t).unwrap(), &p, 1e-12));
    }

    #[test]
    fn reproject_identity_is_exact() {
        let k = Intrinsics::from_fov(16, 12, 60.0);
        let mut frame = Raster::zeros(12, 16, 3);
        let mut depth = DepthMap::new(12, 16);
        for y in 0..12 {
            for x in 0..16 {
                frame.pixel_mut(y, x).copy_from_slice(&[x as f32 / 16.0, y as f32 / 12.0, 0.5]);
                if (x + 2 * y) % 5 != 0 {
                    depth.set(y, x, 1.0 + (x * y) as f32 * 0.1);
                }
            }
        }
        let w = reproject(&frame, &depth, &k, &Pose::identity()).unwrap();
        assert_eq!(w.mask, depth.validity());
        for y in 0..12 {
            for x in 0..16 {
                if depth.valid[y * 16 + x] {
                    assert_eq!(w.frame.pixel(y, x), frame.pixel(y, x));
                } else {
                    assert!(w.frame.pixel(y, x).iter().all(|&c| c == 0.0));
                }
            }
        }
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        // Two source pixels whose rays meet the same target pixel.
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0, 5, 5).unwrap();
        let mut frame = Raster::zeros(5, 5, 3);
        frame.pixel_mut(2, 2).copy_from_slice(&[1.0, 0.0, 0.0]);
        frame.pixel_mut(2, 3).copy_from_slice(&[0.0, 1.0, 0.0]);
        let mut depth = DepthMap::new(5, 5);
        depth.set(2, 2, 2.0);
        depth.set(2, 3, 1.0);
        // Shift x by -0.1 world units: pixel (2,3) at depth 1 moves one column
        // left, pixel (2,2) at depth 2 moves half a column and rounds back.
        let rel = Pose::from_translation(Vector3::new(-0.1, 0.0, 0.0));
        let w = reproject(&frame, &depth, &k, &rel).unwrap();
        assert_eq!(w.frame.pixel(2, 2), &[0.0, 1.0, 0.0]);
        assert_eq!(w.depth[2 * 5 + 2], 1.0);
    }

    #[test]
    fn reproject_rejects_bad_inputs() {
        let k = Intrinsics::from_fov(8, 8, 60.0);
        let frame = Raster::zeros(8, 8, 3);
        assert!(reproject(&frame, &DepthMap::new(8, 7), &k, &Pose::identity()).is_err());
        let bad = Pose { rotation: Matrix3::identity(), translation: Vector3::new(f64::INFINITY, 0.0, 0.0) };
        assert!(reproject(&frame, &DepthMap::new(8, 8), &k, &bad).is_err());
    }

    #[test]
    fn unproject_principal_ray_and_translation() {
        let k = Intrinsics::new(20.0, 20.0, 3.0, 2.0, 7, 5).unwrap();
        let mut depth = DepthMap::new(5, 7);
        depth.set(2, 3, 4.0);
        assert_eq!(unproject(&depth, &k, &Pose::identity()), vec![Vector3::new(0.0, 0.0, 4.0)]);
        let full = DepthMap::constant(5, 7, 2.5);
        let base = unproject(&full, &k, &Pose::identity());
        let moved = unproject(&full, &k, &Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        for (a, b) in base.iter().zip(&moved) {
            assert_eq!(b - a, Vector3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn trajectory_error_cases() {
        let refs: Vec<Pose> = (0..6)
            .map(|i| compose(&Pose::yaw_deg(i as f64 * 7.0), &Pose::from_translation(Vector3::new(0.2 * i as f64, 0.0, 0.1 * i as f64))))
            .collect();
        let e = trajectory_error(&refs, &refs).unwrap();
        assert_eq!((e.rot_deg, e.trans), (0.0, 0.0));
        let offset: Vec<Pose> = refs.iter().map(|p| compose(p, &Pose::yaw_deg(5.0))).collect();
        assert!((trajectory_error(&offset, &refs).unwrap().rot_deg - 5.0).abs() < 1e-6);
        assert!(trajectory_error(&refs[..2], &refs).is_err());
        assert!(trajectory_error(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            prop_assert!(close(&l, &r, 1e-9));
        }

        #[test]
        fn compose_with_inverse_is_identity(a in pose_strategy()) {
            prop_assert!(close(&compose(&a, &a.inverse()), &Pose::identity(), 1e-9));
        }

        #[test]
        fn compose_matches_homogeneous_product(a in pose_strategy(), b in pose_strategy()) {
            let m = a.to_matrix4() * b.to_matrix4();
            let c = compose(&a, &b).to_matrix4();
            prop_assert!((m - c).abs().max() <= 1e-9);
        }

        #[test]
        fn mask_never_exceeds_valid_sources(a in pose_strategy(), seed in 0u64..1000) {
            let k = Intrinsics::from_fov(12, 10, 70.0);
            let mut depth = DepthMap::new(10, 12);
            let frame = Raster::filled(10, 12, &[0.5, 0.5, 0.5]);
            for i in 0..120usize {
                if (i as u64 * 2654435761 + seed) % 3 != 0 {
                    depth.set(i / 12, i % 12, 0.5 + ((i as u64 + seed) % 17) as f32 * 0.3);
                }
            }
            let w = reproject(&frame, &depth, &k, &a).unwrap();
            prop_assert!(w.mask.count() <= depth.valid_count());
            for (i, &m) in w.mask.data.iter().enumerate() {
                if m { prop_assert!(w.depth[i].is_finite() && w.depth[i] > 0.0); }
                else { prop_assert!(w.frame.data[i * 3..i * 3 + 3].iter().all(|&c| c == 0.0)); }
            }
        }
    }
}
