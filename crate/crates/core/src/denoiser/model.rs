use std::rc::Rc;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::stcache::{KvEntry, StCache};
use crate::tensor::Mat;

use super::{attention_mask, BlockKind, DenoiserConfig, KeyLayout, LatentBlock, IMAGE_CHANNELS};

/// Per-layer parameter handles.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub mlp_norm: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Parameter handles of the whole network, either store ids or tape vars.
#[derive(Debug, Clone)]
pub struct Layout<T> {
    pub in_w: T,
    pub in_b: T,
    pub sigma_w: T,
    pub tag_table: T,
    pub layers: Vec<LayerParams<T>>,
    pub out_norm: T,
    pub out_w: T,
    pub out_b: T,
    /// Per-column gain of the warped colour added to the output.
    pub warp_gate: T,
}

impl<T: Copy> LayerParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> LayerParams<U> {
        LayerParams {
            attn_norm: f(self.attn_norm),
            wq: f(self.wq),
            wk: f(self.wk),
            wv: f(self.wv),
            wo: f(self.wo),
            mlp_norm: f(self.mlp_norm),
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl<T: Copy> Layout<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Layout<U> {
        Layout {
            in_w: f(self.in_w),
            in_b: f(self.in_b),
            sigma_w: f(self.sigma_w),
            tag_table: f(self.tag_table),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            out_norm: f(self.out_norm),
            out_w: f(self.out_w),
            out_b: f(self.out_b),
            warp_gate: f(self.warp_gate),
        }
    }
}

/// A cached block as seen by one pass: pre-rotary keys and values per layer
/// and the start of its rotary band.
#[derive(Debug, Clone)]
pub struct Segment {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// x0 prediction, absent for cache-construction passes.
    pub x0: Option<Var>,
    /// The block's own pre-rotary keys and values per layer.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

const SIGMA_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const SIGMA_FEATURES: usize = 1 + 2 * SIGMA_FREQS.len();
/// Typical latent scale used to normalise the noisy input.
pub const SIGMA_DATA: f64 = 0.5;

fn sigma_features(sigma: f64) -> Mat {
    let c = (sigma + 2e-3).ln() / 4.0;
    let mut f = vec![c];
    for w in SIGMA_FREQS {
        f.push((c * w).sin());
        f.push((c * w).cos());
    }
    Mat::from_vec(1, SIGMA_FEATURES, f)
}

fn input_scale(sigma: f64) -> f64 {
    1.0 / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

/// `geometry_dim × latent_dim` map taking each pixel's warped colour
/// channels to the same pixel's latent channels.
fn warp_colour_selection(config: &DenoiserConfig) -> Mat {
    let (g, l) = (config.geometric_channels, IMAGE_CHANNELS);
    let mut m = Mat::zeros(config.geometry_dim(), config.latent_dim());
    for px in 0..config.patch * config.patch {
        for c in 0..l.min(g) {
            m.set(px * g + c, px * l + c, 1.0);
        }
    }
    m
}

/// Operations the generation loop needs from a chunk model.
pub trait ChunkDenoiser: Send + Sync {
    fn config(&self) -> &DenoiserConfig;

    /// Cache entry for a clean block, geometric channels zeroed.
    fn encode(&self, block: &LatentBlock, tag: usize) -> Result<KvEntry>;

    /// x0 prediction for a noisy current block.
    fn denoise(&self, noisy: &Mat, sigma: f64, cache: &StCache, geometry: &Mat, tag: usize) -> Result<Mat>;
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub layout: Layout<ParamId>,
}

impl Denoiser {
    /// Randomly initialised network.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut gauss = |store: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("finite std");
            store.add(name, Mat::from_fn(rows, cols, |_, _| n.sample(&mut rng)))
        };
        let c = config.width;
        let residual = 1.0 / (2.0 * config.layers as f64).sqrt();
        let in_w = gauss(&mut store, "in.w".into(), config.input_dim(), c, (1.0 / config.input_dim() as f64).sqrt());
        let in_b = store.add("in.b", Mat::zeros(1, c));
        let sigma_w = gauss(&mut store, "sigma.w".into(), SIGMA_FEATURES, c, (1.0 / SIGMA_FEATURES as f64).sqrt());
        let tag_table = gauss(&mut store, "tag.table".into(), config.tag_vocab, c, 0.5);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let s = (1.0 / c as f64).sqrt();
            let h = config.mlp_hidden;
            layers.push(LayerParams {
                attn_norm: store.add(format!("l{l}.attn_norm"), Mat::filled(1, c, 1.0)),
                wq: gauss(&mut store, format!("l{l}.wq"), c, c, s),
                wk: gauss(&mut store, format!("l{l}.wk"), c, c, s),
                wv: gauss(&mut store, format!("l{l}.wv"), c, c, s),
                wo: gauss(&mut store, format!("l{l}.wo"), c, c, s * residual),
                mlp_norm: store.add(format!("l{l}.mlp_norm"), Mat::filled(1, c, 1.0)),
                w1: gauss(&mut store, format!("l{l}.w1"), c, h, s),
                b1: store.add(format!("l{l}.b1"), Mat::zeros(1, h)),
                w2: gauss(&mut store, format!("l{l}.w2"), h, c, (1.0 / h as f64).sqrt() * residual),
                b2: store.add(format!("l{l}.b2"), Mat::zeros(1, c)),
            });
        }
        let out_norm = store.add("out.norm", Mat::filled(1, c, 1.0));
        let out_w = gauss(&mut store, "out.w".into(), c, config.latent_dim(), config.output_init * (1.0 / c as f64).sqrt());
        let out_b = store.add("out.b", Mat::zeros(1, config.latent_dim()));
        let warp_gate = store.add("out.warp_gate", Mat::filled(1, config.latent_dim(), 1.0));
        let layout = Layout { in_w, in_b, sigma_w, tag_table, layers, out_norm, out_w, out_b, warp_gate };
        Ok(Self { config, params: store, layout })
    }

    /// Rebuild around an existing parameter store with the standard names.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Invalid(format!("expected {} tensors, found {}", template.params.len(), params.len())));
        }
        for (id, (name, value)) in template.params.ids().zip(template.params.iter()) {
            let other = params.find(name).ok_or_else(|| Error::Invalid(format!("missing tensor {name}")))?;
            if other != id || params.get(other).shape() != value.shape() {
                return Err(Error::Shape(format!("tensor {name} has the wrong slot or shape")));
            }
        }
        Ok(Self { config, params, layout: template.layout })
    }

    /// Register every parameter on `tape`; constants when `trainable` is false.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Layout<Var> {
        self.layout.map(|id| if trainable { tape.param(&self.params, id) } else { tape.constant(self.params.get(id).clone()) })
    }

    /// Shared trunk: input projection, conditioning embeddings and the layer
    /// stack. `input` already holds `[latent ∥ geometry]` columns.
    #[allow(clippy::too_many_arguments)]
    fn trunk(
        &self,
        tape: &mut Tape,
        p: &Layout<Var>,
        input: Var,
        sigma: f64,
        tag: usize,
        start: usize,
        segments: &[Segment],
        with_output: bool,
    ) -> ForwardOutput {
        let cfg = &self.config;
        let n = tape.value(input).rows();
        let mut x = tape.linear(input, p.in_w, Some(p.in_b));
        let feats = tape.constant(sigma_features(sigma));
        let s_emb = tape.matmul(feats, p.sigma_w);
        let s_rows = tape.broadcast_rows(s_emb, n);
        x = tape.add(x, s_rows);
        let t_emb = tape.select_row(p.tag_table, tag);
        let t_rows = tape.broadcast_rows(t_emb, n);
        x = tape.add(x, t_rows);

        let layout = KeyLayout {
            reference: None,
            history: segments.iter().map(|s| tape.value(s.keys[0]).rows()).collect(),
            current: n,
        };
        let mask = Rc::new(attention_mask(&layout));
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        for (l, lp) in p.layers.iter().enumerate() {
            let h = tape.rms_norm(x, lp.attn_norm);
            let q = tape.matmul(h, lp.wq);
            let k = tape.matmul(h, lp.wk);
            let v = tape.matmul(h, lp.wv);
            keys.push(k);
            values.push(v);
            let q = tape.rotary(q, cfg.heads, start, cfg.rotary_base);
            let mut all_k = Vec::with_capacity(segments.len() + 1);
            let mut all_v = Vec::with_capacity(segments.len() + 1);
            for s in segments {
                all_k.push(tape.rotary(s.keys[l], cfg.heads, s.start, cfg.rotary_base));
                all_v.push(s.values[l]);
            }
            all_k.push(tape.rotary(k, cfg.heads, start, cfg.rotary_base));
            all_v.push(v);
            let a = tape.attention(q, &all_k, &all_v, cfg.heads, Some(mask.clone()));
            let a = tape.matmul(a, lp.wo);
            x = tape.add(x, a);
            if !with_output && l + 1 == cfg.layers {
                break;
            }
            let h = tape.rms_norm(x, lp.mlp_norm);
            let h = tape.linear(h, lp.w1, Some(lp.b1));
            let h = tape.gelu(h);
            let h = tape.linear(h, lp.w2, Some(lp.b2));
            x = tape.add(x, h);
        }
        let x0 = with_output.then(|| {
            let h = tape.rms_norm(x, p.out_norm);
            tape.linear(h, p.out_w, Some(p.out_b))
        });
        ForwardOutput { x0, keys, values }
    }

    /// Denoising pass of the current block on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &Layout<Var>,
        noisy: Var,
        sigma: f64,
        geometry: Var,
        tag: usize,
        segments: &[Segment],
    ) -> Var {
        let scaled = tape.scale(noisy, input_scale(sigma));
        let input = tape.concat_cols(&[scaled, geometry]);
        let start = self.config.bands().current_start;
        let x0 = self.trunk(tape, p, input, sigma, tag, start, segments, true).x0.expect("output requested");
        let n = tape.value(x0).rows();
        let pick = tape.constant(warp_colour_selection(&self.config));
        let warp = tape.matmul(geometry, pick);
        let gate = tape.broadcast_rows(p.warp_gate, n);
        let warp = tape.mul(warp, gate);
        tape.add(x0, warp)
    }

    /// Cache-construction pass: the clean block at σ = 0 with zeroed
    /// geometric channels, attending only to itself at its own band.
    pub fn encode_tape(&self, tape: &mut Tape, p: &Layout<Var>, clean: Var, tag: usize, kind: BlockKind) -> (Vec<Var>, Vec<Var>) {
        let input = self.encode_input(tape, clean);
        self.encode_from_input(tape, p, input, tag, kind)
    }

    /// Token input of a cached block: clean latents with the geometric
    /// channels zeroed.
    pub fn encode_input(&self, tape: &mut Tape, clean: Var) -> Var {
        let n = tape.value(clean).rows();
        let scaled = tape.scale(clean, input_scale(0.0));
        let zeros = tape.constant(Mat::zeros(n, self.config.geometry_dim()));
        tape.concat_cols(&[scaled, zeros])
    }

    pub fn encode_from_input(&self, tape: &mut Tape, p: &Layout<Var>, input: Var, tag: usize, kind: BlockKind) -> (Vec<Var>, Vec<Var>) {
        let start = self.config.bands().start(kind);
        let out = self.trunk(tape, p, input, 0.0, tag, start, &[], false);
        (out.keys, out.values)
    }

    /// Cache contents as tape constants, ordered reference then history
    /// oldest to newest.
    pub fn cache_segments(&self, tape: &mut Tape, cache: &StCache) -> Vec<Segment> {
        let history: Vec<&KvEntry> = cache.history().collect();
        self.segments_from(tape, cache.reference(), &history)
    }

    /// Constant segments for a reference entry and history entries ordered
    /// oldest to newest.
    pub fn segments_from(&self, tape: &mut Tape, reference: Option<&KvEntry>, history: &[&KvEntry]) -> Vec<Segment> {
        let bands = self.config.bands();
        let mut out = Vec::new();
        let mut push = |tape: &mut Tape, e: &KvEntry, start: usize| {
            out.push(Segment {
                keys: e.keys.iter().map(|m| tape.constant(m.clone())).collect(),
                values: e.values.iter().map(|m| tape.constant(m.clone())).collect(),
                start,
            });
        };
        if let Some(r) = reference {
            push(tape, r, bands.reference_start);
        }
        let count = history.len();
        for (i, e) in history.iter().enumerate() {
            push(tape, e, bands.history_slot(count - i));
        }
        out
    }

    pub(crate) fn check_tag(&self, tag: usize) -> Result<()> {
        if tag >= self.config.tag_vocab {
            return Err(Error::Condition(format!("scene tag {tag} outside vocabulary of {}", self.config.tag_vocab)));
        }
        Ok(())
    }

    /// Turn a tape pass into a cache entry.
    pub fn entry_from(tape: &Tape, keys: &[Var], values: &[Var], chunk_index: usize, kind: BlockKind) -> KvEntry {
        KvEntry {
            keys: keys.iter().map(|&k| tape.value(k).clone()).collect(),
            values: values.iter().map(|&v| tape.value(v).clone()).collect(),
            chunk_index,
            kind,
            cursor: None,
        }
    }
}

impl ChunkDenoiser for Denoiser {
    fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn encode(&self, block: &LatentBlock, tag: usize) -> Result<KvEntry> {
        block.check(&self.config)?;
        self.check_tag(tag)?;
        if block.kind == BlockKind::Current {
            return Err(Error::Condition("current blocks are not cached".into()));
        }
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(block.tokens.clone());
        let (k, v) = self.encode_tape(&mut tape, &p, x, tag, block.kind);
        Ok(Self::entry_from(&tape, &k, &v, block.chunk_index, block.kind))
    }

    fn denoise(&self, noisy: &Mat, sigma: f64, cache: &StCache, geometry: &Mat, tag: usize) -> Result<Mat> {
        let cfg = &self.config;
        if noisy.shape() != (cfg.tokens(), cfg.latent_dim()) {
            return Err(Error::Shape(format!("noisy block is {:?}", noisy.shape())));
        }
        if geometry.shape() != (cfg.tokens(), cfg.geometry_dim()) {
            return Err(Error::Shape(format!("geometric condition is {:?}, token grid needs {}x{}", geometry.shape(), cfg.tokens(), cfg.geometry_dim())));
        }
        cache.check_compatible(cfg)?;
        self.check_tag(tag)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise level {sigma}")));
        }
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let segs = self.cache_segments(&mut tape, cache);
        let x = tape.constant(noisy.clone());
        let g = tape.constant(geometry.clone());
        let out = self.forward_tape(&mut tape, &p, x, sigma, g, tag, &segs);
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Gradients;
    use crate::denoiser::zero_geometry;
    use rand::Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            heads: 2,
            width: 16,
            mlp_hidden: 24,
            patch: 2,
            chunk_len: 2,
            frame_height: 4,
            frame_width: 4,
            ..Default::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn filled_cache(model: &Denoiser, seed: u64) -> StCache {
        let cfg = &model.config;
        let mut cache = StCache::new(cfg);
        let r = LatentBlock::new(random(cfg.tokens(), cfg.latent_dim(), seed), 0, BlockKind::Reference);
        cache.set_reference(model.encode(&r, 1).unwrap()).unwrap();
        let h = LatentBlock::new(random(cfg.tokens(), cfg.latent_dim(), seed + 1), 0, BlockKind::History);
        cache.append_history(model.encode(&h, 1).unwrap()).unwrap();
        cache
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let cfg = tiny();
        let mut m = Denoiser::new(cfg.clone(), 1).unwrap();
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            m.params.get_mut(id).scale_assign(0.0);
        }
        let b = Mat::from_fn(1, cfg.latent_dim(), |_, j| j as f64 * 0.1 - 0.3);
        *m.params.get_mut(m.layout.out_b) = b.clone();
        let out = m.denoise(&random(cfg.tokens(), cfg.latent_dim(), 3), 1.0, &StCache::new(&cfg), &zero_geometry(&cfg), 0).unwrap();
        for r in 0..out.rows() {
            assert_eq!(out.row(r), b.row(0));
        }
    }

    #[test]
    fn zero_output_projection_copies_the_warp() {
        let cfg = DenoiserConfig { output_init: 0.0, ..tiny() };
        let m = Denoiser::new(cfg.clone(), 4).unwrap();
        let cache = filled_cache(&m, 5);
        let geom = random(cfg.tokens(), cfg.geometry_dim(), 8);
        let out = m.denoise(&random(cfg.tokens(), cfg.latent_dim(), 6), 2.0, &cache, &geom, 1).unwrap();
        for r in 0..out.rows() {
            for px in 0..cfg.patch * cfg.patch {
                for c in 0..IMAGE_CHANNELS {
                    assert_eq!(out.get(r, px * IMAGE_CHANNELS + c), geom.get(r, px * 4 + c));
                }
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        for (i, (heads, width, patch, k)) in [(1, 8, 2, 1), (2, 16, 4, 3), (4, 32, 2, 2)].into_iter().enumerate() {
            let cfg = DenoiserConfig { heads, width, patch, chunk_len: k, frame_height: 4, frame_width: 8, mlp_hidden: 8, ..Default::default() };
            let m = Denoiser::new(cfg.clone(), i as u64).unwrap();
            let cache = filled_cache(&m, 9);
            let x = random(cfg.tokens(), cfg.latent_dim(), 4);
            let out = m.denoise(&x, 0.5, &cache, &zero_geometry(&cfg), 2).unwrap();
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn geometry_channels_matter_only_on_current_block() {
        let cfg = tiny();
        let m = Denoiser::new(cfg.clone(), 2).unwrap();
        let cache = filled_cache(&m, 5);
        let x = random(cfg.tokens(), cfg.latent_dim(), 6);
        let zero = m.denoise(&x, 0.7, &cache, &zero_geometry(&cfg), 1).unwrap();
        let warp = m.denoise(&x, 0.7, &cache, &random(cfg.tokens(), cfg.geometry_dim(), 8), 1).unwrap();
        assert!(zero.zip_map(&warp, |a, b| a - b).max_abs() > 1e-6);
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny();
        let m = Denoiser::new(cfg.clone(), 2).unwrap();
        let cache = StCache::new(&cfg);
        let x = random(cfg.tokens(), cfg.latent_dim(), 6);
        assert!(matches!(m.denoise(&x, 1.0, &cache, &Mat::zeros(3, 3), 0), Err(Error::Shape(_))));
        let other = DenoiserConfig { width: 8, ..tiny() };
        assert!(m.denoise(&x, 1.0, &StCache::new(&other), &zero_geometry(&cfg), 0).is_err());
        assert!(m.denoise(&x, 1.0, &cache, &zero_geometry(&cfg), 99).is_err());
    }

    /// Every parameter's gradient of a scalar loss against central differences.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut m = Denoiser::new(cfg.clone(), 11).unwrap();
        let cache = filled_cache(&m, 12);
        let x = random(cfg.tokens(), cfg.latent_dim(), 13);
        let geom = random(cfg.tokens(), cfg.geometry_dim(), 14);
        let target = Rc::new(random(cfg.tokens(), cfg.latent_dim(), 15));
        let hist = random(cfg.tokens(), cfg.latent_dim(), 16);
        // Loss covers the denoising pass and a differentiable cache write.
        let loss = |m: &Denoiser, grad: bool| -> (f64, Option<Gradients>) {
            let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
            let p = m.bind(&mut tape, grad);
            let mut segs = m.cache_segments(&mut tape, &cache);
            let h = tape.constant(hist.clone());
            let (k, v) = m.encode_tape(&mut tape, &p, h, 1, BlockKind::History);
            segs[1] = Segment { keys: k, values: v, start: segs[1].start };
            let xv = tape.constant(x.clone());
            let gv = tape.constant(geom.clone());
            let out = m.forward_tape(&mut tape, &p, xv, 0.8, gv, 1, &segs);
            let l = tape.mse(out, target.clone());
            let value = tape.value(l).get(0, 0);
            (value, grad.then(|| tape.backward(l)))
        };
        let grads = loss(&m, true).1.unwrap();
        let eps = 1e-3;
        let ids: Vec<_> = m.params.ids().collect();
        let mut checked = 0;
        for id in ids {
            let g = grads.param(id).expect("every parameter receives a gradient").clone();
            let n = m.params.get(id).len();
            // Sample entries of large tensors to keep the test quick.
            let stride = (n / 12).max(1);
            for i in (0..n).step_by(stride) {
                let orig = m.params.get(id).data()[i];
                m.params.get_mut(id).data_mut()[i] = orig + eps;
                let up = loss(&m, false).0;
                m.params.get_mut(id).data_mut()[i] = orig - eps;
                let down = loss(&m, false).0;
                m.params.get_mut(id).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = g.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-2, "{} [{i}]: analytic {an} vs fd {fd}", m.params.name(id));
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
