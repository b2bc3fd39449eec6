//! One thread against the default pool on the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcdc_core::align::{fmt_align, FmtParams};
use pcdc_core::cloud::{CodecConfig, Coord, ScaleLevel};
use pcdc_core::geomcodec::encode_coords;
use pcdc_core::knn::build_knn;
use pcdc_core::nn::{Matrix, ParamSet};
use pcdc_core::rasched::FrameKind;
use pcdc_core::synth::SynthOptions;
use pcdc_core::{encode_frame, morton, par, ContextMode, Model};

fn cloud(n: usize, depth: u32, seed: u64) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Coord> = (0..n)
        .map(|_| [0; 3].map(|_: u32| rng.gen_range(0..1u32 << depth)))
        .collect();
    morton::sort(&mut v);
    v.dedup();
    v
}

/// `(label, threads)`; zero keeps the default pool.
const MODES: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn run<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        f()
    } else {
        par::with_threads(threads, f)
    }
}

fn knn(c: &mut Criterion) {
    let anchors = cloud(20_000, 8, 1);
    let refs = cloud(20_000, 8, 2);
    let mut group = c.benchmark_group("knn_k32");
    for (label, threads) in MODES {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| run(threads, || build_knn(&anchors, &refs, 32).unwrap()))
        });
    }
    group.finish();
}

fn fmt(c: &mut Criterion) {
    let cur = cloud(3000, 6, 3);
    let reference = cloud(3000, 6, 4);
    let width = 64;
    let mut ps = ParamSet::new();
    let params = FmtParams::new(&mut ps, "fmt", width, 2, 64.0, 5);
    let feats = |n: usize| Matrix::from_vec(n, width, (0..n * width).map(|i| (i as f64 * 0.37).sin()).collect());
    let cur = ScaleLevel::new(3, cur.clone(), feats(cur.len())).unwrap();
    let reference = ScaleLevel::new(3, reference.clone(), feats(reference.len())).unwrap();
    let adj = build_knn(&cur.coords, &reference.coords, 32).unwrap();
    let mut group = c.benchmark_group("fmt_align");
    group.sample_size(20);
    for (label, threads) in MODES {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| run(threads, || fmt_align(&cur, &reference, &adj, &params, &ps).unwrap()))
        });
    }
    group.finish();
}

fn octree(c: &mut Criterion) {
    let pts = cloud(10_000, 10, 6);
    c.bench_function("octree_encode_10k", |b| b.iter(|| encode_coords(&pts, 10).unwrap()));
}

fn frame(c: &mut Criterion) {
    let model = Model::new(&CodecConfig::default()).unwrap();
    let seq = SynthOptions::default().sequence().unwrap();
    let i0 = encode_frame(&model, &seq[0], FrameKind::I, &[], ContextMode::Aligned).unwrap();
    let p2 = encode_frame(&model, &seq[2], FrameKind::P, &[&i0.recon], ContextMode::Aligned).unwrap();
    let mut group = c.benchmark_group("encode_b_frame");
    group.sample_size(10);
    for (label, threads) in MODES {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                run(threads, || {
                    encode_frame(&model, &seq[1], FrameKind::B, &[&i0.recon, &p2.recon], ContextMode::Aligned).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, knn, fmt, octree, frame);
criterion_main!(benches);
