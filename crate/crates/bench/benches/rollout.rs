// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use pidgrad::autodiff::{Plain, Tape};
use pidgrad::lti::expm;
use pidgrad::simloop::{rollout, RolloutConfig};
use pidgrad::tuner::evaluate;
use pidgrad_bench::{controller, experiment};
use std::hint::black_box;

fn rollouts(c: &mut Criterion) {
    let mut group = c.benchmark_group("rollout");
    for name in ["system1", "system4"] {
        let exp = experiment(name);
        let ctl = controller(&exp);
        let r = &exp.train[0];
        let cfg = RolloutConfig::new(exp.problem.horizon);
        group.bench_with_input(BenchmarkId::new("plain", name), &exp, |b, exp| {
            b.iter(|| rollout(&Plain, &exp.problem.plant, &ctl, black_box(r), &cfg, &exp.problem.limits).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("taped", name), &exp, |b, exp| {
            b.iter(|| {
                let tape = Tape::new();
                let leaves: Vec<_> = ctl.params().iter().map(|&p| tape.var(p).unwrap()).collect();
                let taped = ctl.with_params(&tape, &leaves).unwrap();
                rollout(&tape, &exp.problem.plant, &taped, black_box(r), &cfg, &exp.problem.limits).unwrap();
                tape.len()
            })
        });
        group.bench_with_input(BenchmarkId::new("gradient", name), &exp, |b, exp| {
            b.iter(|| exp.problem.episode_gradient(&ctl, black_box(r)).unwrap())
        });
    }
    group.finish();
}

fn batch(c: &mut Criterion) {
    let exp = experiment("system2");
    let ctl = controller(&exp);
    c.bench_function("evaluate/system2-train", |b| {
        b.iter(|| evaluate(&exp.problem, &ctl, black_box(&exp.train)).unwrap())
    });
}

fn matrix_exponential(c: &mut Criterion) {
    let mut group = c.benchmark_group("expm");
    for n in [2usize, 4, 8] {
        let m = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| b.iter(|| expm(black_box(m))));
    }
    group.finish();
}

criterion_group!(benches, rollouts, batch, matrix_exponential);
criterion_main!(benches);
