//! Autoregressive student rollouts with chunk-wise gradient replay, and the
//! multi-condition causal initialisation built on them.

use std::rc::Rc;

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Gradients, Tape, Var};
use crate::denoiser::{BlockKind, Denoiser, Layout, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngCursor;
use crate::stcache::{plan_and_replay, ChunkRecord, FirstPass, KvEntry, RecomputePlan, ReplayOutcome, StCache};
use crate::tensor::Mat;

use super::data::Corpus;
use super::metrics::MetricSink;
use super::{Stage, Task, TrainPlan};

/// Conditions of one chunk before encoding.
#[derive(Debug, Clone)]
pub struct ChunkConditions {
    /// Reference tokens; `None` for tag-only generation.
    pub reference: Option<Mat>,
    pub geometry: Mat,
}

/// Everything needed to rebuild one chunk on a gradient tape. Cache entries
/// are stored values and enter the replay as constants.
#[derive(Debug, Clone)]
pub struct ChunkInputs {
    pub reference: Option<KvEntry>,
    /// Oldest first.
    pub history: Vec<KvEntry>,
    pub geometry: Mat,
    pub tag: usize,
    /// Ground truth, when the head needs it.
    pub target: Option<Mat>,
}

/// What a chunk graph returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkHead {
    /// The final clean estimate of the sampling schedule.
    Sample,
    /// `1×1` mean over schedule steps of the x0 mean-squared error against
    /// the chunk's target.
    StepMse,
}

pub type RolloutOutcome = ReplayOutcome;

/// Record one chunk's sampling schedule on `tape`. Each step's input is a
/// constant, so gradients reach the parameters through every step's x0 but
/// not along the noise chain.
pub fn chunk_graph(
    model: &Denoiser,
    tape: &mut Tape,
    p: &Layout<Var>,
    inputs: &ChunkInputs,
    schedule: &NoiseSchedule,
    cursor: RngCursor,
    head: ChunkHead,
) -> Result<Var> {
    Ok(chunk_graph_with_sample(model, tape, p, inputs, schedule, cursor, head)?.0)
}

/// [`chunk_graph`] plus the final x0.
fn chunk_graph_with_sample(
    model: &Denoiser,
    tape: &mut Tape,
    p: &Layout<Var>,
    inputs: &ChunkInputs,
    schedule: &NoiseSchedule,
    cursor: RngCursor,
    head: ChunkHead,
) -> Result<(Var, Var)> {
    let cfg = &model.config;
    let (rows, cols) = (cfg.tokens(), cfg.latent_dim());
    if inputs.geometry.shape() != (rows, cfg.geometry_dim()) {
        return Err(Error::Shape(format!("geometric condition is {:?}", inputs.geometry.shape())));
    }
    model.check_tag(inputs.tag)?;
    let history: Vec<&KvEntry> = inputs.history.iter().collect();
    let segs = model.segments_from(tape, inputs.reference.as_ref(), &history);
    let g = tape.constant(inputs.geometry.clone());
    let noise = |s: usize| Mat::from_vec(rows, cols, RngCursor::new(cursor.seed, cursor.chunk, s as u64).normals("noise", rows * cols));
    let mut x = noise(0);
    x.scale_assign(schedule.sigmas[0]);
    let mut x0s = Vec::with_capacity(schedule.count());
    for (s, &sigma) in schedule.sigmas.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let x0 = model.forward_tape(tape, p, xv, sigma, g, inputs.tag, &segs);
        if let Some(&next) = schedule.sigmas.get(s + 1) {
            let eps = noise(s + 1);
            x = tape.value(x0).zip_map(&eps, |a, e| a + next * e);
        }
        x0s.push(x0);
    }
    let sample = *x0s.last().expect("schedule is non-empty");
    match head {
        ChunkHead::Sample => Ok((sample, sample)),
        ChunkHead::StepMse => {
            let target = Rc::new(inputs.target.clone().ok_or_else(|| Error::Condition("step loss needs a target".into()))?);
            if target.shape() != (rows, cols) {
                return Err(Error::Shape(format!("target is {:?}", target.shape())));
            }
            let losses: Vec<Var> = x0s.iter().map(|&v| tape.mse(v, target.clone())).collect();
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l);
            }
            Ok((tape.scale(total, 1.0 / losses.len() as f64), sample))
        }
    }
}

fn encode_entry(model: &Denoiser, tokens: &Mat, tag: usize, kind: BlockKind, chunk: usize, geometry_max: &mut f64) -> KvEntry {
    let mut tape = Tape::no_grad();
    let p = model.bind(&mut tape, false);
    let clean = tape.constant(tokens.clone());
    let input = model.encode_input(&mut tape, clean);
    let latent = model.config.latent_dim();
    let v = tape.value(input);
    let g = v.cols_range(latent, v.cols() - latent).max_abs();
    *geometry_max = geometry_max.max(g);
    let (k, vv) = model.encode_from_input(&mut tape, &p, input, tag, kind);
    Denoiser::entry_from(&tape, &k, &vv, chunk, kind)
}

struct Trace {
    first: FirstPass<ChunkInputs>,
    history_geometry_max: f64,
}

fn check_rollout(model: &Denoiser, conds: &[ChunkConditions], targets: Option<&[Mat]>, schedule: &NoiseSchedule) -> Result<()> {
    if conds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if schedule.count() == 0 {
        return Err(Error::Invalid("empty noise schedule".into()));
    }
    if let Some(t) = targets {
        if t.len() != conds.len() {
            return Err(Error::Condition(format!("{} targets for {} chunks", t.len(), conds.len())));
        }
    }
    let shape = (model.config.tokens(), model.config.latent_dim());
    if conds.iter().filter_map(|c| c.reference.as_ref()).any(|r| r.shape() != shape) {
        return Err(Error::Shape("reference tokens do not match the model".into()));
    }
    Ok(())
}

fn trace(
    model: &Denoiser,
    conds: &[ChunkConditions],
    targets: Option<&[Mat]>,
    tag: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    head: ChunkHead,
) -> Result<Trace> {
    check_rollout(model, conds, targets, schedule)?;
    let mut cache = StCache::new(&model.config);
    let mut chunks = Vec::with_capacity(conds.len());
    let mut outputs = Vec::with_capacity(conds.len());
    let mut geometry_max = 0.0f64;
    let mut scratch = 0.0f64;
    for (i, cond) in conds.iter().enumerate() {
        let reference = cond.reference.as_ref().map(|r| encode_entry(model, r, tag, BlockKind::Reference, i, &mut scratch));
        let inputs = ChunkInputs {
            reference,
            history: cache.history().cloned().collect(),
            geometry: cond.geometry.clone(),
            tag,
            target: targets.map(|t| t[i].clone()),
        };
        let cursor = RngCursor::new(seed, i as u64, 0);
        let mut tape = Tape::no_grad();
        let p = model.bind(&mut tape, false);
        let (out, sample) = chunk_graph_with_sample(model, &mut tape, &p, &inputs, schedule, cursor, head)?;
        let (output, sample) = (tape.value(out).clone(), tape.value(sample).clone());
        let mut entry = encode_entry(model, &sample, tag, BlockKind::History, i, &mut geometry_max);
        entry.cursor = Some(cursor);
        cache.append_history(entry)?;
        chunks.push(ChunkRecord { chunk_index: i, snapshot: inputs, cursor });
        outputs.push(output);
    }
    let total_chunks = chunks.len();
    Ok(Trace { first: FirstPass { plan: RecomputePlan { chunks, total_chunks }, outputs }, history_geometry_max: geometry_max })
}

/// Stage 1: run the rollout without gradients, feeding each chunk's sample
/// into the history cache, and record what each chunk saw.
pub fn rollout_first_pass(
    model: &Denoiser,
    conds: &[ChunkConditions],
    targets: Option<&[Mat]>,
    tag: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    head: ChunkHead,
) -> Result<FirstPass<ChunkInputs>> {
    Ok(trace(model, conds, targets, tag, schedule, seed, head)?.first)
}

/// Stage 2: replay every chunk on its own tape and accumulate parameter
/// gradients of the loss `terminal` assigns to the chunk outputs.
pub fn rollout_replay(
    model: &Denoiser,
    first: FirstPass<ChunkInputs>,
    schedule: &NoiseSchedule,
    head: ChunkHead,
    terminal: impl FnOnce(&[Mat]) -> Result<(f64, Vec<Mat>)>,
) -> Result<RolloutOutcome> {
    plan_and_replay(&model.params, || Ok(first), terminal, |tape, rec| {
        let p = model.bind(tape, true);
        chunk_graph(model, tape, &p, &rec.snapshot, schedule, rec.cursor, head)
    })
}

/// Reference route: the same rollout recorded on a single tape with one
/// backward pass. Returns the loss, gradients and chunk outputs.
#[allow(clippy::too_many_arguments)]
pub fn full_graph_gradients(
    model: &Denoiser,
    conds: &[ChunkConditions],
    targets: Option<&[Mat]>,
    tag: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    head: ChunkHead,
    terminal: impl FnOnce(&[Mat]) -> Result<(f64, Vec<Mat>)>,
) -> Result<(f64, Gradients, Vec<Mat>)> {
    check_rollout(model, conds, targets, schedule)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let mut cache = StCache::new(&model.config);
    let mut scratch = 0.0;
    let mut outs = Vec::with_capacity(conds.len());
    for (i, cond) in conds.iter().enumerate() {
        let inputs = ChunkInputs {
            reference: cond.reference.as_ref().map(|r| encode_entry(model, r, tag, BlockKind::Reference, i, &mut scratch)),
            history: cache.history().cloned().collect(),
            geometry: cond.geometry.clone(),
            tag,
            target: targets.map(|t| t[i].clone()),
        };
        let cursor = RngCursor::new(seed, i as u64, 0);
        let (out, sample) = chunk_graph_with_sample(model, &mut tape, &p, &inputs, schedule, cursor, head)?;
        let value = tape.value(sample).clone();
        cache.append_history(encode_entry(model, &value, tag, BlockKind::History, i, &mut scratch))?;
        outs.push(out);
    }
    let values: Vec<Mat> = outs.iter().map(|&v| tape.value(v).clone()).collect();
    let (loss, seeds) = terminal(&values)?;
    if seeds.len() != outs.len() {
        return Err(Error::Invalid("terminal gradient count differs from chunk count".into()));
    }
    let seeds: Vec<(Var, Mat)> = outs.into_iter().zip(seeds).collect();
    let mut grads = tape.backward_from(&seeds);
    grads.drop_node_grads();
    Ok((loss, grads, values))
}

fn mean_terminal(outs: &[Mat]) -> Result<(f64, Vec<Mat>)> {
    let n = outs.len() as f64;
    let loss = outs.iter().map(|m| m.get(0, 0)).sum::<f64>() / n;
    Ok((loss, outs.iter().map(|_| Mat::filled(1, 1, 1.0 / n)).collect()))
}

/// Mean step loss of a causal-init rollout, without gradients.
pub fn init_loss(
    model: &Denoiser,
    conds: &[ChunkConditions],
    targets: &[Mat],
    tag: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let first = rollout_first_pass(model, conds, Some(targets), tag, schedule, seed, ChunkHead::StepMse)?;
    Ok(mean_terminal(&first.outputs)?.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub losses: Vec<f64>,
    /// Largest absolute geometric-channel value of any history block that
    /// entered the cache.
    pub history_geometry_max: f64,
    pub peak_activations: usize,
}

/// Causal initialisation: roll the student out on ground-truth clips with
/// full conditions, feeding its own samples back as history, and regress
/// every step's x0 on the ground truth at `plan.lr_teacher`.
pub fn causal_init(
    student: &mut Denoiser,
    corpus: &Corpus,
    schedule: &NoiseSchedule,
    plan: &TrainPlan,
    mut sink: Option<&mut MetricSink>,
) -> Result<InitReport> {
    plan.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if corpus.config != student.config {
        return Err(Error::Condition("corpus was built for a different model configuration".into()));
    }
    let mut adam = Adam::new(&student.params, AdamConfig::default());
    let mut report = InitReport { losses: Vec::with_capacity(plan.iterations), history_geometry_max: 0.0, peak_activations: 0 };
    for it in 0..plan.iterations {
        let cursor = RngCursor::new(plan.seed, 0, it as u64);
        let mut rng = cursor.stream("init");
        let clip = &corpus.clips[rng.random_range(0..corpus.len())];
        let chunks = plan.chunks.min(clip.chunks());
        let conds = clip.conditions(&student.config, Task::V2V, chunks);
        let rollout_seed: u64 = rng.random();
        let tr = trace(student, &conds, Some(&clip.targets[..chunks]), clip.tag, schedule, rollout_seed, ChunkHead::StepMse)?;
        report.history_geometry_max = report.history_geometry_max.max(tr.history_geometry_max);
        let out = rollout_replay(student, tr.first, schedule, ChunkHead::StepMse, mean_terminal)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite("init loss"));
        }
        adam.step(&mut student.params, &out.grads, plan.lr_teacher);
        report.peak_activations = report.peak_activations.max(out.peak_activations);
        report.losses.push(out.loss);
        if let Some(s) = sink.as_deref_mut() {
            s.log(it, Stage::Init, &[("init", out.loss)], &[("student", plan.lr_teacher)])?;
        }
    }
    Ok(report)
}
