//! Distribution matching distillation of the chunked student against two
//! frozen teachers, alternating a control task and a fidelity task.

use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::denoiser::{BlockKind, ChunkDenoiser, Denoiser, LatentBlock, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngCursor;
use crate::stcache::StCache;
use crate::tensor::Mat;

use super::data::Corpus;
use super::metrics::MetricSink;
use super::rollout::{rollout_first_pass, rollout_replay, ChunkConditions, ChunkHead};
use super::{dmd_terms, dmd_weight, DistillLoss, ScoreModel, ScoreRole, Stage, Task, TrainPlan};

/// Which tasks a distillation run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    /// Switch between V2V and T2V every `alternation_period` iterations,
    /// starting with V2V.
    Alternate,
    ControlOnly,
    VisualOnly,
}

impl TaskMix {
    pub fn task_at(self, iteration: usize, period: usize) -> Task {
        match self {
            TaskMix::ControlOnly => Task::V2V,
            TaskMix::VisualOnly => Task::T2V,
            TaskMix::Alternate => {
                if (iteration / period.max(1)) % 2 == 0 {
                    Task::V2V
                } else {
                    Task::T2V
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JdmdConfig {
    pub mix: TaskMix,
    /// Student sampling schedule.
    pub student_schedule: NoiseSchedule,
    /// Noise levels drawn uniformly for the score evaluations and the fake
    /// score's training.
    pub score_sigmas: Vec<f64>,
    /// Fake-score updates per student update.
    pub fake_steps: usize,
}

impl Default for JdmdConfig {
    fn default() -> Self {
        Self {
            mix: TaskMix::Alternate,
            student_schedule: NoiseSchedule::few_step(),
            score_sigmas: NoiseSchedule::teacher().sigmas,
            fake_steps: 1,
        }
    }
}

/// A denoiser read as a score model under fixed conditions.
pub struct NeuralScore<'a> {
    model: &'a Denoiser,
    role: ScoreRole,
    cache: StCache,
    geometry: Mat,
    tag: usize,
}

impl<'a> NeuralScore<'a> {
    /// `history` is ordered oldest first; only the model's window is kept.
    pub fn new(model: &'a Denoiser, role: ScoreRole, reference: Option<&Mat>, history: &[Mat], geometry: &Mat, tag: usize) -> Result<Self> {
        let mut cache = StCache::new(&model.config);
        if let Some(r) = reference {
            cache.set_reference(model.encode(&LatentBlock::new(r.clone(), 0, BlockKind::Reference), tag)?)?;
        }
        for (i, h) in history.iter().enumerate() {
            cache.append_history(model.encode(&LatentBlock::new(h.clone(), i, BlockKind::History), tag)?)?;
        }
        Ok(Self { model, role, cache, geometry: geometry.clone(), tag })
    }

    pub fn denoise(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        self.model.denoise(x, sigma, &self.cache, &self.geometry, self.tag)
    }
}

impl ScoreModel for NeuralScore<'_> {
    fn role(&self) -> ScoreRole {
        self.role
    }

    fn score(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        let d = self.denoise(x, sigma)?;
        Ok(d.zip_map(x, |dd, xx| (dd - xx) / (sigma * sigma)))
    }
}

/// Student, fake score and the two frozen teachers, with optimiser state.
pub struct Distiller {
    pub student: Denoiser,
    pub fake: Denoiser,
    pub real: Arc<Denoiser>,
    pub synthetic: Arc<Denoiser>,
    pub plan: TrainPlan,
    pub config: JdmdConfig,
    student_opt: Adam,
    fake_opt: Adam,
    iteration: usize,
}

impl Distiller {
    /// The fake score starts as a copy of the student.
    pub fn new(student: Denoiser, real: Arc<Denoiser>, synthetic: Arc<Denoiser>, plan: TrainPlan, config: JdmdConfig) -> Result<Self> {
        plan.validate()?;
        if real.config != student.config || synthetic.config != student.config {
            return Err(Error::Condition("teachers and student must share a configuration".into()));
        }
        if config.score_sigmas.is_empty() || config.score_sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid("score noise levels must be positive".into()));
        }
        let fake = student.clone();
        let student_opt = Adam::new(&student.params, AdamConfig::default());
        let fake_opt = Adam::new(&fake.params, AdamConfig::default());
        Ok(Self { student, fake, real, synthetic, plan, config, student_opt, fake_opt, iteration: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Task and rollout seed of the next iteration, and the clip it draws.
    fn draw(&self, corpus: &Corpus) -> (Task, usize, u64) {
        let mut rng = RngCursor::new(self.plan.seed, 0, self.iteration as u64).stream("jdmd");
        let task = self.config.mix.task_at(self.iteration, self.plan.alternation_period);
        (task, rng.random_range(0..corpus.len()), rng.random())
    }

    /// One iteration on a clip drawn from `corpus`.
    pub fn step(&mut self, corpus: &Corpus) -> Result<DistillLoss> {
        if corpus.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (task, c, seed) = self.draw(corpus);
        let clip = &corpus.clips[c];
        let conds = clip.conditions(&self.student.config, task, self.plan.chunks);
        jdmd_step(self, &conds, clip.tag, task, seed)
    }

    pub fn run(&mut self, corpus: &Corpus, mut sink: Option<&mut MetricSink>) -> Result<Vec<DistillLoss>> {
        let mut out = Vec::with_capacity(self.plan.iterations);
        for _ in 0..self.plan.iterations {
            let it = self.iteration;
            let loss = self.step(corpus)?;
            if let Some(s) = sink.as_deref_mut() {
                s.log(
                    it,
                    Stage::Jdmd,
                    &[("vis", loss.vis), ("ctrl", loss.ctrl), ("total", loss.total)],
                    &[("student", self.plan.lr_student), ("fake", self.plan.lr_fake)],
                )?;
            }
            out.push(loss);
        }
        Ok(out)
    }
}

fn check_conditions(conds: &[ChunkConditions], task: Task) -> Result<()> {
    for (i, c) in conds.iter().enumerate() {
        match task {
            Task::T2V if c.reference.is_some() || c.geometry.max_abs() != 0.0 => {
                return Err(Error::Condition(format!("T2V chunk {i} carries reference or warp inputs")));
            }
            Task::V2V if c.reference.is_none() => {
                return Err(Error::Condition(format!("V2V chunk {i} has no reference")));
            }
            _ => {}
        }
    }
    Ok(())
}

fn history_window(samples: &[Mat], i: usize, window: usize) -> &[Mat] {
    &samples[i.saturating_sub(window)..i]
}

/// One distillation step: roll the student out, match its chunks against
/// `teacher` with the fake score, update the student (gradient scaled by
/// `weight`), then update the fake score on the same samples.
///
/// The per-chunk divergence gradient is normalised by the mean absolute gap
/// between the sample and the teacher's clean estimate. Returns the mean
/// surrogate loss `½·mean(g²)`.
pub fn dmd_step(d: &mut Distiller, conds: &[ChunkConditions], tag: usize, teacher: &Denoiser, role: ScoreRole, weight: f64, seed: u64) -> Result<f64> {
    let cfg = d.student.config.clone();
    let schedule = d.config.student_schedule.clone();
    let first = rollout_first_pass(&d.student, conds, None, tag, &schedule, seed, ChunkHead::Sample)?;
    let samples = first.outputs.clone();
    let n = samples.len() as f64;
    let pick = |i: usize, name: &str| {
        let c = RngCursor::new(seed, i as u64, 0);
        let sigma = d.config.score_sigmas[c.stream(name).random_range(0..d.config.score_sigmas.len())];
        (sigma, c)
    };

    let mut surrogate = 0.0;
    let mut seeds = Vec::with_capacity(samples.len());
    for (i, (x_hat, cond)) in samples.iter().zip(conds).enumerate() {
        let history = history_window(&samples, i, cfg.history_window);
        let real = NeuralScore::new(teacher, role, cond.reference.as_ref(), history, &cond.geometry, tag)?;
        let fake = NeuralScore::new(&d.fake, ScoreRole::Fake, cond.reference.as_ref(), history, &cond.geometry, tag)?;
        let (sigma, c) = pick(i, "dmd_sigma");
        let eps = Mat::from_vec(x_hat.rows(), x_hat.cols(), c.normals("dmd_noise", x_hat.len()));
        let terms = dmd_terms(x_hat, sigma, &eps, &real, &fake)?;
        let scale = dmd_weight(x_hat, sigma, &terms);
        let g = terms.grad.map(|v| v * scale);
        surrogate += 0.5 * g.sum_sq() / g.len() as f64 / n;
        let per = weight / (g.len() as f64 * n);
        seeds.push(g.map(|v| v * per));
    }
    if !surrogate.is_finite() {
        return Err(Error::NonFinite("distillation loss"));
    }
    let out = rollout_replay(&d.student, first, &schedule, ChunkHead::Sample, move |_| Ok((surrogate, seeds)))?;
    d.student_opt.step(&mut d.student.params, &out.grads, d.plan.lr_student);

    for f in 0..d.config.fake_steps {
        let mut tape = Tape::new();
        let p = d.fake.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for (i, (x_hat, cond)) in samples.iter().zip(conds).enumerate() {
            let history = history_window(&samples, i, cfg.history_window);
            let cond_cache = NeuralScore::new(&d.fake, ScoreRole::Fake, cond.reference.as_ref(), history, &cond.geometry, tag)?;
            let (sigma, c) = pick(i, &format!("fake_sigma{f}"));
            let eps = c.normals(&format!("fake_noise{f}"), x_hat.len());
            let noisy = Mat::from_vec(x_hat.rows(), x_hat.cols(), x_hat.data().iter().zip(&eps).map(|(x, e)| x + sigma * e).collect());
            let segs = d.fake.cache_segments(&mut tape, &cond_cache.cache);
            let g = tape.constant(cond.geometry.clone());
            let xv = tape.constant(noisy);
            let x0 = d.fake.forward_tape(&mut tape, &p, xv, sigma, g, tag, &segs);
            let l = tape.mse(x0, Rc::new(x_hat.clone()));
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
        let total = tape.scale(total.ok_or(Error::EmptyBatch)?, 1.0 / n);
        let grads = tape.backward(total);
        drop(tape);
        d.fake_opt.step(&mut d.fake.params, &grads, d.plan.lr_fake);
    }
    d.iteration += 1;
    Ok(surrogate)
}

/// One JDMD iteration. V2V batches are matched against the synthetic
/// teacher and weighted by `λ_ctrl`; T2V batches against the real teacher.
pub fn jdmd_step(d: &mut Distiller, conds: &[ChunkConditions], tag: usize, task: Task, seed: u64) -> Result<DistillLoss> {
    check_conditions(conds, task)?;
    let lambda = d.plan.lambda_ctrl;
    let (teacher, role, weight) = match task {
        Task::V2V => (d.synthetic.clone(), ScoreRole::Synthetic, lambda),
        Task::T2V => (d.real.clone(), ScoreRole::Real, 1.0),
    };
    let value = dmd_step(d, conds, tag, &teacher, role, weight, seed)?;
    Ok(DistillLoss::for_task(task, value, lambda))
}
