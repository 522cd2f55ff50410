//! One worker versus the full pool on the hot paths. Build with
//! `--no-default-features` to time the sequential fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use opl_core::basis::BasisConfig;
use opl_core::optimize::PolicyObjective;
use opl_core::sim::{mc_average_reward, simulate, Actor, Scenario};
use opl_core::{flatten, FeatureMap, KernelConfig, PolicyParams, TuningPair, Tunings};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    // At least two workers so the comparison exists even on a single core.
    let full = rayon::current_num_threads().max(2);
    let mut out = vec![("1-thread".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if opl_core::par::is_parallel() {
        out.push((format!("{full}-threads"), rayon::ThreadPoolBuilder::new().num_threads(full).build().unwrap()));
    }
    out
}

fn bench_objective(c: &mut Criterion) {
    let env = Scenario::one();
    let data = simulate(&env, Actor::Behavior, 20, 50, 1).unwrap();
    let tuples = flatten(&data);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let pair = TuningPair { lambda: 1e-3, mu: 1e-3 };
    let template = PolicyParams::zeros(3, 10.0, FeatureMap::Intercept);
    let obj = PolicyObjective::from_tuples(&tuples, &kernel, Tunings { value: pair, ratio: pair }, template, BasisConfig::default()).unwrap();
    let theta = [0.2, -0.3, 0.1, 0.4];
    let mut group = c.benchmark_group("objective_gradient_n1000");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| b.iter(|| pool.install(|| obj.analytic_gradient(&theta).unwrap())));
    }
    group.finish();
}

fn bench_monte_carlo(c: &mut Criterion) {
    let env = Scenario::one();
    let policy = PolicyParams::new(vec![0.5, 0.1, -0.2, 0.3], 10.0, FeatureMap::Intercept).unwrap();
    let mut group = c.benchmark_group("mc_value_200x200");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| pool.install(|| mc_average_reward(&env, &policy, 200, 200, 0, 9).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_objective, bench_monte_carlo);
criterion_main!(benches);
