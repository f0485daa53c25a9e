//! Parallel vs sequential execution on the crate's hot data-parallel loops.
//!
//! Run with `cargo bench` (parallel strategy, default features); each
//! benchmark pairs the rayon-backed entry point with its always-compiled
//! sequential twin, so one run shows the speedup (or, on a single-core host,
//! the overhead) of fanning out.
//!
//! The closures are the crate's real per-index work items: a dual-activation
//! kernel pair, one Haar draw of a Monte-Carlo moment estimate, and one
//! datum's Jacobian rows.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use ntklab::activations::{dual_mean, dual_mean_deriv, Activation, Cov2};
use ntklab::config::{InitFamily, NetworkConfig, Parameterization};
use ntklab::exec;
use ntklab::network::{jacobian, InputBatch};
use ntklab::sampler::{haar_orthogonal_from, sample_params};

/// Stand-in for a per-index Monte-Carlo work item: a short deterministic
/// float-heavy loop.
fn work_item(i: usize) -> f64 {
    let mut acc = (i as f64).sin();
    for k in 0..512 {
        acc = (acc + k as f64 * 1e-3).tanh();
    }
    acc
}

fn bench_map_indexed(c: &mut Criterion) {
    let n = 256;
    let mut group = c.benchmark_group("map_indexed");
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map_indexed(black_box(n), work_item))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_indexed_seq(black_box(n), work_item))
    });
    group.finish();
}

/// One layer of the kernel recursion: a tanh dual mean and its derivative
/// for every input pair. Tanh goes through adaptive quadrature, so this is
/// the expensive activation path.
fn bench_kernel_pairs(c: &mut Criterion) {
    let d = 32;
    let mut rng = ntklab::rng::stream(1, 0);
    let x = Array2::from_shape_fn((d, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let gram = x.dot(&x.t()) / 8.0;
    let pairs: Vec<Cov2> = (0..d)
        .flat_map(|i| (i..d).map(move |j| (i, j)))
        .map(|(i, j)| Cov2::new(gram[[i, i]], gram[[i, j]], gram[[j, j]]).unwrap())
        .collect();
    let eval = |p: usize| {
        let c = &pairs[p];
        dual_mean(c, Activation::Tanh) + dual_mean_deriv(c, Activation::Tanh)
    };

    let mut group = c.benchmark_group("kernel_pairs");
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map_indexed(black_box(pairs.len()), eval))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_indexed_seq(black_box(pairs.len()), eval))
    });
    group.finish();
}

/// One draw of a Haar-moment Monte-Carlo estimate: sample an orthogonal
/// matrix from the draw's own stream and read off an entry product.
fn bench_haar_moments(c: &mut Criterion) {
    let n = 64;
    let draws = 64;
    let draw = |i: usize| {
        let mut rng = ntklab::rng::mc_stream(3, i);
        let w = haar_orthogonal_from(n, n, &mut rng).unwrap();
        w[[0, 0]] * w[[0, 0]]
    };

    let mut group = c.benchmark_group("haar_moments");
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map_indexed(black_box(draws), draw))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_indexed_seq(black_box(draws), draw))
    });
    group.finish();
}

/// Per-datum Jacobian blocks, the inner loop of the empirical tangent
/// kernel.
fn bench_jacobian_rows(c: &mut Criterion) {
    let cfg = NetworkConfig::fcn(
        vec![8, 256, 256, 1],
        Activation::Erf,
        1.0,
        0.1,
        InitFamily::Gaussian,
        Parameterization::Ntk,
    )
    .unwrap();
    let params = sample_params(&cfg, 5).unwrap();
    let d = 16;
    let mut rng = ntklab::rng::stream(2, 0);
    let x = Array2::from_shape_fn((d, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let row = |i: usize| {
        let one = InputBatch::Flat(x.row(i).to_owned().insert_axis(ndarray::Axis(0)));
        jacobian(&params, &one).unwrap().values
    };

    let mut group = c.benchmark_group("jacobian_rows");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map_indexed(black_box(d), row))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_indexed_seq(black_box(d), row))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_map_indexed,
    bench_kernel_pairs,
    bench_haar_moments,
    bench_jacobian_rows
);
criterion_main!(benches);
