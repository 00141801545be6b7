//! Multi-step diffusion pretraining of the two teachers.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::denoiser::{zero_geometry, BlockKind, Denoiser, Layout, NoiseSchedule, Segment, SIGMA_MAX, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngCursor;
use crate::tensor::Mat;

use super::data::{Clip, Corpus};
use super::metrics::MetricSink;
use super::{ScoreRole, Stage, TrainPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherRole {
    /// Perceptual teacher: scene tag only.
    Real,
    /// Motion teacher: reference, ground-truth history and warp.
    Synthetic,
}

impl TeacherRole {
    pub fn label(self) -> &'static str {
        match self {
            TeacherRole::Real => "real",
            TeacherRole::Synthetic => "synthetic",
        }
    }

    pub fn score_role(self) -> ScoreRole {
        match self {
            TeacherRole::Real => ScoreRole::Real,
            TeacherRole::Synthetic => ScoreRole::Synthetic,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TeacherReport {
    pub losses: Vec<f64>,
}

/// Cached segments a teacher sees for chunk `j`, encoded on `tape` so the
/// cache path trains too.
fn teacher_segments(model: &Denoiser, tape: &mut Tape, p: &Layout<Var>, clip: &Clip, j: usize, role: TeacherRole) -> Vec<Segment> {
    if role == TeacherRole::Real {
        return Vec::new();
    }
    let bands = model.config.bands();
    let mut segs = Vec::with_capacity(2);
    let r = tape.constant(clip.references[j].clone());
    let (keys, values) = model.encode_tape(tape, p, r, clip.tag, BlockKind::Reference);
    segs.push(Segment { keys, values, start: bands.reference_start });
    if j > 0 && model.config.history_window > 0 {
        let h = tape.constant(clip.targets[j - 1].clone());
        let (keys, values) = model.encode_tape(tape, p, h, clip.tag, BlockKind::History);
        segs.push(Segment { keys, values, start: bands.history_slot(1) });
    }
    segs
}

fn teacher_geometry(model: &Denoiser, clip: &Clip, j: usize, role: TeacherRole) -> Mat {
    match role {
        TeacherRole::Real => zero_geometry(&model.config),
        TeacherRole::Synthetic => clip.geometry[j].clone(),
    }
}

/// x0 mean-squared error of one noised chunk.
pub fn teacher_loss(
    model: &Denoiser,
    tape: &mut Tape,
    p: &Layout<Var>,
    clip: &Clip,
    j: usize,
    sigma: f64,
    noise: &Mat,
    role: TeacherRole,
) -> Result<Var> {
    if j >= clip.chunks() {
        return Err(Error::Invalid(format!("chunk {j} of a {}-chunk clip", clip.chunks())));
    }
    let target = &clip.targets[j];
    if noise.shape() != target.shape() {
        return Err(Error::Shape(format!("noise {:?} vs target {:?}", noise.shape(), target.shape())));
    }
    let segs = teacher_segments(model, tape, p, clip, j, role);
    let g = tape.constant(teacher_geometry(model, clip, j, role));
    let x = tape.constant(target.zip_map(noise, |a, e| a + sigma * e));
    let x0 = model.forward_tape(tape, p, x, sigma, g, clip.tag, &segs);
    Ok(tape.mse(x0, Rc::new(target.clone())))
}

/// Train `model` as the teacher `role` with log-uniform noise levels in
/// `[SIGMA_MIN, SIGMA_MAX]` at `plan.lr_teacher`.
pub fn train_teacher(
    model: &mut Denoiser,
    corpus: &Corpus,
    role: TeacherRole,
    plan: &TrainPlan,
    mut sink: Option<&mut MetricSink>,
) -> Result<TeacherReport> {
    plan.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if corpus.config != model.config {
        return Err(Error::Condition("corpus was built for a different model configuration".into()));
    }
    let mut adam = Adam::new(&model.params, AdamConfig::default());
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let mut losses = Vec::with_capacity(plan.iterations);
    for it in 0..plan.iterations {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for b in 0..plan.batch {
            let cursor = RngCursor::new(plan.seed, b as u64, it as u64);
            let mut rng = cursor.stream("teacher");
            let clip = &corpus.clips[rng.random_range(0..corpus.len())];
            let j = rng.random_range(0..clip.chunks());
            let sigma = rng.random_range(lo..hi).exp();
            let t = &clip.targets[j];
            let noise = Mat::from_vec(t.rows(), t.cols(), cursor.normals("noise", t.len()));
            let l = teacher_loss(model, &mut tape, &p, clip, j, sigma, &noise, role)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
        let total = tape.scale(total.expect("batch is non-empty"), 1.0 / plan.batch as f64);
        let loss = tape.value(total).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::NonFinite("teacher loss"));
        }
        let grads = tape.backward(total);
        drop(tape);
        adam.step(&mut model.params, &grads, plan.lr_teacher);
        losses.push(loss);
        if let Some(s) = sink.as_deref_mut() {
            s.log(it, Stage::Teacher, &[(role.label(), loss)], &[(role.label(), plan.lr_teacher)])?;
        }
    }
    Ok(TeacherReport { losses })
}

/// Sample chunk `j` of `clip` from a teacher with ground-truth history.
pub fn sample_teacher(model: &Denoiser, clip: &Clip, j: usize, role: TeacherRole, schedule: &NoiseSchedule, seed: u64) -> Result<Mat> {
    let (rows, cols) = clip.targets[j].shape();
    let mut tape = Tape::no_grad();
    let p = model.bind(&mut tape, false);
    let segs = teacher_segments(model, &mut tape, &p, clip, j, role);
    let g = tape.constant(teacher_geometry(model, clip, j, role));
    let noise = |s: usize| Mat::from_vec(rows, cols, RngCursor::new(seed, j as u64, s as u64).normals("noise", rows * cols));
    let mut x = noise(0);
    x.scale_assign(schedule.sigmas[0]);
    let mut x0 = Mat::zeros(rows, cols);
    for (s, &sigma) in schedule.sigmas.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let out = model.forward_tape(&mut tape, &p, xv, sigma, g, clip.tag, &segs);
        x0 = tape.value(out).clone();
        if let Some(&next) = schedule.sigmas.get(s + 1) {
            x = x0.zip_map(&noise(s + 1), |a, e| a + next * e);
        }
    }
    Ok(x0)
}
