//! Constant-size key/value store and chunk-wise gradient replay.
//!
//! [`StCache`] keeps one reference entry and a sliding window of at most `W`
//! history entries, each holding pre-rotary keys and values for every layer.
//! [`plan_and_replay`] trains through a long autoregressive run while keeping
//! only one chunk's differentiable activations alive at a time.

use std::collections::VecDeque;

use serde::Serialize;

use crate::autograd::{Gradients, ParamStore, Tape, Var};
use crate::denoiser::{BlockKind, DenoiserConfig};
use crate::error::{Error, Result};
use crate::rng::RngCursor;
use crate::tensor::Mat;

/// Keys and values of one cached block for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    /// Pre-rotary keys, one `K·P × C` matrix per layer.
    pub keys: Vec<Mat>,
    pub values: Vec<Mat>,
    pub chunk_index: usize,
    pub kind: BlockKind,
    /// Noise stream the block was generated with, if any.
    pub cursor: Option<RngCursor>,
}

impl KvEntry {
    pub fn scalars(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Mat::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct StCache {
    layers: usize,
    tokens: usize,
    width: usize,
    capacity: usize,
    reference: Option<KvEntry>,
    history: VecDeque<KvEntry>,
}

#[derive(Debug, Serialize)]
struct EntryDump {
    kind: BlockKind,
    chunk_index: usize,
    tokens: usize,
    width: usize,
    cursor: Option<RngCursor>,
}

#[derive(Debug, Serialize)]
struct LayerDump {
    layer: usize,
    entries: Vec<EntryDump>,
}

impl StCache {
    pub fn new(config: &DenoiserConfig) -> Self {
        Self {
            layers: config.layers,
            tokens: config.tokens(),
            width: config.width,
            capacity: config.history_window,
            reference: None,
            history: VecDeque::with_capacity(config.history_window + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn check_entry(&self, e: &KvEntry) -> Result<()> {
        let shape_ok = e.keys.len() == self.layers
            && e.values.len() == self.layers
            && e.keys.iter().chain(&e.values).all(|m| m.shape() == (self.tokens, self.width));
        if shape_ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "cache entry does not match {} layers of {}x{}",
                self.layers, self.tokens, self.width
            )))
        }
    }

    /// Errors unless the cache was built for `config`'s shapes.
    pub fn check_compatible(&self, config: &DenoiserConfig) -> Result<()> {
        if (self.layers, self.tokens, self.width, self.capacity)
            == (config.layers, config.tokens(), config.width, config.history_window)
        {
            Ok(())
        } else {
            Err(Error::CacheConfig)
        }
    }

    /// Overwrite the reference slot. History is untouched.
    pub fn set_reference(&mut self, entry: KvEntry) -> Result<()> {
        self.check_entry(&entry)?;
        self.reference = Some(entry);
        Ok(())
    }

    pub fn reference(&self) -> Option<&KvEntry> {
        self.reference.as_ref()
    }

    /// Append a history entry, evicting and returning the oldest one when the
    /// window is full.
    pub fn append_history(&mut self, entry: KvEntry) -> Result<Option<KvEntry>> {
        self.check_entry(&entry)?;
        if let Some(last) = self.history.back() {
            if entry.chunk_index <= last.chunk_index {
                return Err(Error::NonMonotoneChunk { got: entry.chunk_index, last: last.chunk_index });
            }
        }
        self.history.push_back(entry);
        Ok(if self.history.len() > self.capacity { self.history.pop_front() } else { None })
    }

    /// History entries, oldest first.
    pub fn history(&self) -> impl ExactSizeIterator<Item = &KvEntry> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Entries held per layer: the reference slot (if set) plus history.
    pub fn entries_per_layer(&self) -> Vec<usize> {
        vec![usize::from(self.reference.is_some()) + self.history.len(); self.layers]
    }

    /// Total stored scalars.
    pub fn resident_scalars(&self) -> usize {
        self.reference.iter().chain(&self.history).map(KvEntry::scalars).sum()
    }

    pub fn clear_history(&mut self) {
        self.history.clear();
    }

    /// Per-layer entry metadata as JSON.
    pub fn debug_dump(&self) -> serde_json::Value {
        let layers: Vec<LayerDump> = (0..self.layers)
            .map(|layer| LayerDump {
                layer,
                entries: self
                    .reference
                    .iter()
                    .chain(&self.history)
                    .map(|e| EntryDump {
                        kind: e.kind,
                        chunk_index: e.chunk_index,
                        tokens: e.keys[layer].rows(),
                        width: e.keys[layer].cols(),
                        cursor: e.cursor,
                    })
                    .collect(),
            })
            .collect();
        serde_json::json!({ "capacity": self.capacity, "layers": layers })
    }
}

/// What stage 1 recorded for one chunk.
#[derive(Debug, Clone)]
pub struct ChunkRecord<S> {
    pub chunk_index: usize,
    /// Inputs needed to rebuild the chunk: conditions and cached content.
    pub snapshot: S,
    pub cursor: RngCursor,
}

#[derive(Debug, Clone)]
pub struct RecomputePlan<S> {
    pub chunks: Vec<ChunkRecord<S>>,
    pub total_chunks: usize,
}

/// Stage 1 result: the plan plus every chunk's output.
#[derive(Debug, Clone)]
pub struct FirstPass<S> {
    pub plan: RecomputePlan<S>,
    pub outputs: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub outputs: Vec<Mat>,
    pub loss: f64,
    pub grads: Gradients,
    /// Largest differentiable-activation count of any single replay tape.
    pub peak_activations: usize,
}

/// Two-stage training pass over a chunked run.
///
/// `first_pass` runs the whole generation without gradients. `terminal` maps
/// all chunk outputs to the loss value and `∂loss/∂output` per chunk. `replay`
/// rebuilds one chunk on a gradient tape from its record and returns the
/// output variable; its parameters must come from `params`. Each replay tape
/// is dropped before the next chunk starts.
pub fn plan_and_replay<S>(
    params: &ParamStore,
    first_pass: impl FnOnce() -> Result<FirstPass<S>>,
    terminal: impl FnOnce(&[Mat]) -> Result<(f64, Vec<Mat>)>,
    mut replay: impl FnMut(&mut Tape, &ChunkRecord<S>) -> Result<Var>,
) -> Result<ReplayOutcome> {
    let FirstPass { plan, outputs } = first_pass()?;
    if plan.chunks.len() != outputs.len() || plan.total_chunks != outputs.len() {
        return Err(Error::Invalid("plan and outputs disagree on chunk count".into()));
    }
    let (loss, out_grads) = terminal(&outputs)?;
    if out_grads.len() != outputs.len() {
        return Err(Error::Invalid("terminal gradient count differs from chunk count".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut peak = 0;
    for ((record, expected), g) in plan.chunks.iter().zip(&outputs).zip(out_grads) {
        let mut tape = Tape::new();
        let out = replay(&mut tape, record)?;
        let got = tape.value(out);
        if got.shape() != expected.shape() {
            return Err(Error::Shape(format!("replayed chunk {} has shape {:?}", record.chunk_index, got.shape())));
        }
        let diff = got.zip_map(expected, |a, b| a - b).max_abs();
        if !(diff <= 1e-5) {
            return Err(Error::ReplayDivergence { chunk: record.chunk_index, diff });
        }
        peak = peak.max(tape.differentiable_activations());
        let mut chunk_grads = tape.backward_from(&[(out, g)]);
        chunk_grads.drop_node_grads();
        grads.accumulate(&chunk_grads);
    }
    Ok(ReplayOutcome { outputs, loss, grads, peak_activations: peak })
}
