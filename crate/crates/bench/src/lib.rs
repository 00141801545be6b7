//! Shared fixtures for the benchmarks.

use worldroam::denoiser::{BlockKind, ChunkDenoiser, Denoiser, DenoiserConfig, LatentBlock};
use worldroam::stcache::StCache;
use worldroam::Mat;

/// The 64×64, two-frame shape used for desk-scale training.
pub fn desk_config(width: usize) -> DenoiserConfig {
    DenoiserConfig { width, mlp_hidden: 2 * width, chunk_len: 2, patch: 8, ..DenoiserConfig::default() }
}

/// A cache holding a reference block and a full history window.
pub fn filled_cache(model: &Denoiser) -> StCache {
    let cfg = &model.config;
    let mut cache = StCache::new(cfg);
    let block = |kind, i| LatentBlock::new(Mat::filled(cfg.tokens(), cfg.latent_dim(), 0.1 * (i as f64 + 1.0)), i, kind);
    cache.set_reference(model.encode(&block(BlockKind::Reference, 0), 0).expect("encodes")).expect("fits");
    for i in 0..cfg.history_window {
        cache.append_history(model.encode(&block(BlockKind::History, i), 0).expect("encodes")).expect("fits");
    }
    cache
}
