use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ddc_core::engine::EngineConfig;
use ddc_core::synthetic::{
    compare_stopping, engine_monte_carlo, pruning_separation_experiment, CompareSettings, Family, GeneratorSpec,
    PruningSettings,
};
use ddc_core::Execution;
use std::hint::black_box;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn stopping(c: &mut Criterion) {
    let mut group = c.benchmark_group("compare_stopping");
    let spec = GeneratorSpec {
        p: 0.6,
        mu_c: 0.9,
        mu_i: 0.2,
        weight_spread: 0.1,
        ..GeneratorSpec::default()
    };
    for (name, execution) in STRATEGIES {
        let settings = CompareSettings {
            trials: 500,
            execution,
            ..CompareSettings::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &settings, |b, s| {
            b.iter(|| black_box(compare_stopping(&spec, s).unwrap().summary.cow.mean_n))
        });
    }
    group.finish();
}

fn pruning(c: &mut Criterion) {
    let mut group = c.benchmark_group("pruning_separation");
    group.sample_size(10);
    let spec = GeneratorSpec {
        mu_c: 0.9,
        mu_i: 0.9,
        ..GeneratorSpec::default()
    };
    for (name, execution) in STRATEGIES {
        let settings = PruningSettings {
            paths_per_family: 100,
            execution,
            ..PruningSettings::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &settings, |b, s| {
            b.iter(|| black_box(pruning_separation_experiment(&spec, &Family::ALL, s).unwrap().thresholds))
        });
    }
    group.finish();
}

fn engine(c: &mut Criterion) {
    let mut group = c.benchmark_group("engine_monte_carlo");
    group.sample_size(10);
    let spec = GeneratorSpec {
        p: 0.8,
        family: Family::DipRecover,
        weight_spread: 0.1,
        ..GeneratorSpec::default()
    };
    let cfg = EngineConfig {
        window: 64,
        ..EngineConfig::default()
    };
    for (name, execution) in STRATEGIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &execution, |b, &e| {
            b.iter(|| black_box(engine_monte_carlo(&spec, &cfg, 100, e).unwrap().summary.mean_paths))
        });
    }
    group.finish();
}

criterion_group!(benches, stopping, pruning, engine);
criterion_main!(benches);
