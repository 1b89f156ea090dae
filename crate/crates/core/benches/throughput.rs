//! Parallel vs sequential throughput for the hot paths.
//!
//! Build with default features to measure the rayon-backed dispatchers;
//! the `*_seq` rows measure the same code driven by plain loops, so one
//! run shows what the `parallel` feature buys on this machine.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use toothrec::conditioning::ConditionSource;
use toothrec::meshing::eval_grid;
use toothrec::metrics::{chamfer_l1, chamfer_l1_brute, SurfaceSamples};
use toothrec::numerics::kernels;
use toothrec::occupancy::{ConditioningMode, Reconstructor};
use toothrec::synth::{generate_tooth, render_patch, ToothClass};

fn pseudo(len: usize, salt: u64) -> Vec<f64> {
    // Cheap deterministic fill; values in [-1, 1).
    (0..len)
        .map(|i| {
            let h = (i as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt);
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn bench_matmul(c: &mut Criterion) {
    // Activation-sized product: one training step's dominant shape.
    let (m, k, n) = (2048, 128, 128);
    let x = pseudo(m * k, 1);
    let w = pseudo(k * n, 2);
    let mut out = vec![0.0; m * n];
    let flops = (2 * m * k * n) as u64;

    let mut group = c.benchmark_group("matmul_2048x128x128");
    group.throughput(Throughput::Elements(flops));
    group.bench_function(BenchmarkId::new("dispatch", "feature"), |b| {
        b.iter(|| kernels::matmul(&x, &w, &mut out, m, k, n));
    });
    group.bench_function(BenchmarkId::new("sequential", "plain"), |b| {
        b.iter(|| kernels::matmul_seq(&x, &w, &mut out, m, k, n));
    });
    group.finish();

    let mut dw = vec![0.0; k * n];
    let mut group = c.benchmark_group("matmul_tn_2048x128x128");
    group.throughput(Throughput::Elements(flops));
    group.bench_function("weight_grad", |b| {
        b.iter(|| kernels::matmul_tn(&x, &out, &mut dw, m, k, n));
    });
    group.finish();
}

fn bench_grid_eval(c: &mut Criterion) {
    // Reduced network and lattice: scales linearly to the full protocol
    // (the per-point cost is what the parallel dispatch amortizes).
    let rec = Reconstructor::with_dims(ConditioningMode::Cx, ConditionSource::PatchOnly, 2.0, 32, 2, 7);
    let class = ToothClass::new(19).unwrap();
    let (_, oracle) = generate_tooth(class, 0);
    let cond = rec.condition(class, &render_patch(&oracle)).unwrap();
    let res = 24usize;

    let mut group = c.benchmark_group("grid_eval_24x24x24_f32b2");
    group.sample_size(10);
    group.throughput(Throughput::Elements((res * res * res) as u64));
    group.bench_function("conditioned", |b| {
        b.iter(|| eval_grid(&rec.occupancy, Some(&cond), [res, res, res]).unwrap());
    });
    group.finish();
}

fn bench_chamfer(c: &mut Criterion) {
    let n = 2000usize;
    let raw_a = pseudo(3 * n, 11);
    let raw_b = pseudo(3 * n, 13);
    let cloud = |raw: &[f64], tag: &str| {
        let points: Vec<[f64; 3]> = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let normals = vec![[1.0, 0.0, 0.0]; points.len()];
        SurfaceSamples::new(points, normals, tag).unwrap()
    };
    let a = cloud(&raw_a, "a");
    let b = cloud(&raw_b, "b");

    let mut group = c.benchmark_group("chamfer_2000v2000");
    group.throughput(Throughput::Elements((2 * n) as u64));
    group.bench_function(BenchmarkId::new("kd_tree", "dispatch"), |bch| {
        bch.iter(|| chamfer_l1(&a, &b).unwrap());
    });
    group.bench_function(BenchmarkId::new("brute_force", "oracle"), |bch| {
        bch.iter(|| chamfer_l1_brute(&a, &b).unwrap());
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_grid_eval, bench_chamfer);
criterion_main!(benches);
