use std::hint::black_box;
use std::rc::Rc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use worldroam::autograd::Tape;
use worldroam::denoiser::{zero_geometry, ChunkDenoiser, Denoiser, NoiseSchedule};
use worldroam::distill::{full_graph_gradients, rollout_first_pass, rollout_replay, ChunkConditions, ChunkHead};
use worldroam::Mat;
use worldroam_bench::{desk_config, filled_cache};

fn denoise(c: &mut Criterion) {
    let mut group = c.benchmark_group("denoise");
    group.sample_size(20);
    for width in [32, 64, 128] {
        let cfg = desk_config(width);
        let m = Denoiser::new(cfg.clone(), 1).unwrap();
        let cache = filled_cache(&m);
        let x = Mat::filled(cfg.tokens(), cfg.latent_dim(), 0.2);
        let g = zero_geometry(&cfg);
        group.bench_with_input(BenchmarkId::new("forward", width), &width, |b, _| {
            b.iter(|| m.denoise(black_box(&x), 1.0, &cache, &g, 0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", width), &width, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = m.bind(&mut tape, true);
                let segs = m.cache_segments(&mut tape, &cache);
                let xv = tape.constant(x.clone());
                let gv = tape.constant(g.clone());
                let out = m.forward_tape(&mut tape, &p, xv, 1.0, gv, 0, &segs);
                let loss = tape.mse(out, Rc::new(x.clone()));
                tape.backward(loss)
            })
        });
    }
    group.finish();
}

fn mean_of_steps(outs: &[Mat]) -> worldroam::Result<(f64, Vec<Mat>)> {
    let n = outs.len() as f64;
    Ok((outs.iter().map(|m| m.get(0, 0)).sum::<f64>() / n, outs.iter().map(|_| Mat::filled(1, 1, 1.0 / n)).collect()))
}

/// Chunk-wise replay against one full graph over the same rollout.
fn backprop(c: &mut Criterion) {
    let mut group = c.benchmark_group("rollout_backprop");
    group.sample_size(10);
    let cfg = desk_config(64);
    let m = Denoiser::new(cfg.clone(), 2).unwrap();
    let schedule = NoiseSchedule::few_step();
    for chunks in [2, 4] {
        let conds: Vec<ChunkConditions> = (0..chunks)
            .map(|_| ChunkConditions { reference: Some(Mat::filled(cfg.tokens(), cfg.latent_dim(), 0.1)), geometry: zero_geometry(&cfg) })
            .collect();
        let targets: Vec<Mat> = (0..chunks).map(|_| Mat::filled(cfg.tokens(), cfg.latent_dim(), 0.3)).collect();
        group.bench_with_input(BenchmarkId::new("replay", chunks), &chunks, |b, _| {
            b.iter(|| {
                let first = rollout_first_pass(&m, &conds, Some(&targets), 0, &schedule, 7, ChunkHead::StepMse).unwrap();
                rollout_replay(&m, first, &schedule, ChunkHead::StepMse, mean_of_steps).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("full_graph", chunks), &chunks, |b, _| {
            b.iter(|| full_graph_gradients(&m, &conds, Some(&targets), 0, &schedule, 7, ChunkHead::StepMse, mean_of_steps).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, denoise, backprop);
criterion_main!(benches);
