//! Parallel (`par::map`) vs sequential (`par::map_seq`) on the crate's main
//! batch workloads. Without the `parallel` feature both rows run the
//! sequential path.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array1;
use rand::Rng;

use sarl_core::envs::three_state_mdp;
use sarl_core::net::{Activation, Mlp};
use sarl_core::relax::{bound_outputs, BoundMethod};
use sarl_core::tabular::{evaluate_optimal_adversary, TabularPolicy};
use sarl_core::{par, seed};

fn states(n: usize, dim: usize) -> Vec<Array1<f64>> {
    let mut rng = seed::rng(3);
    (0..n).map(|_| Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))).collect()
}

fn bounds(c: &mut Criterion) {
    let net = Mlp::random(&[4, 64, 64, 4], Activation::Relu, 1);
    let xs = states(256, 4);
    let f = |s: &Array1<f64>| bound_outputs(&net, s, 0.1, BoundMethod::IbpBackward).unwrap().upper.sum();
    let mut g = c.benchmark_group("ibp_backward_256_states");
    g.bench_function(BenchmarkId::new("map", par::is_parallel()), |b| b.iter(|| black_box(par::map(&xs, f))));
    g.bench_function("map_seq", |b| b.iter(|| black_box(par::map_seq(&xs, f))));
    g.finish();
}

fn forward(c: &mut Criterion) {
    let net = Mlp::random(&[4, 64, 64, 4], Activation::Tanh, 2);
    let xs = states(4096, 4);
    let f = |s: &Array1<f64>| net.forward(s).unwrap().sum();
    let mut g = c.benchmark_group("forward_4096_states");
    g.bench_function(BenchmarkId::new("map", par::is_parallel()), |b| b.iter(|| black_box(par::map(&xs, f))));
    g.bench_function("map_seq", |b| b.iter(|| black_box(par::map_seq(&xs, f))));
    g.finish();
}

fn policy_grid(c: &mut Criterion) {
    let mdp = three_state_mdp();
    let axis: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    let mut pts = Vec::new();
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                pts.push([a, b, c]);
            }
        }
    }
    let f = |p: &[f64; 3]| {
        let pi = TabularPolicy::from_first_action_probs(p).unwrap();
        evaluate_optimal_adversary(&mdp, &pi, 1e-8).unwrap().0 .0[0]
    };
    let mut g = c.benchmark_group("sa_mdp_grid_11cubed");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("map", par::is_parallel()), |b| b.iter(|| black_box(par::map(&pts, f))));
    g.bench_function("map_seq", |b| b.iter(|| black_box(par::map_seq(&pts, f))));
    g.finish();
}

criterion_group!(benches, bounds, forward, policy_grid);
criterion_main!(benches);
