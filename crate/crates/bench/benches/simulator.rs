//! Hot paths: cost-model calls, map building, lookups, prefetch planning and
//! a short end-to-end run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use reusesim::memory::plan_prefetch_raw;
use reusesim::{
    generate_trace, run, GpuProfile, GridSpec, HedgingMap, LengthDistribution, ModelProfile, OffloadingMap, SimConfig,
    SimMode, TraceSpec, TrainingMode,
};

fn cost_model(c: &mut Criterion) {
    let m = ModelProfile::llama_8b();
    c.bench_function("colocated_iteration_cpa", |b| {
        b.iter(|| m.colocated_iteration(TrainingMode::Cpa, black_box(3000), black_box(128)))
    });
    c.bench_function("prefill_recording", |b| b.iter(|| m.prefill_latency(black_box(2048), 4, true)));
}

fn maps(c: &mut Criterion) {
    let (m, g) = (ModelProfile::llama_8b(), GpuProfile::a100_80g());
    c.bench_function("offloading_map_build", |b| {
        b.iter(|| OffloadingMap::build(&m, &g, GridSpec::default(), TrainingMode::Cpa).unwrap())
    });
    c.bench_function("hedging_map_build", |b| {
        b.iter(|| HedgingMap::build(&m, &g, 500, 8000, TrainingMode::Cpa, 128).unwrap())
    });
    let map = OffloadingMap::build(&m, &g, GridSpec::default(), TrainingMode::Cpa).unwrap();
    c.bench_function("offloading_lookup", |b| {
        b.iter(|| map.lookup(black_box(4000), black_box(2000), black_box(10)).unwrap())
    });
}

fn prefetch(c: &mut Criterion) {
    c.bench_function("plan_prefetch_32_layers", |b| {
        b.iter(|| plan_prefetch_raw(32, black_box(20), 0.074, 0.0, 0.033))
    });
}

fn short_run(c: &mut Criterion) {
    let cfg = SimConfig::new(
        ModelProfile::llama_8b(),
        GpuProfile::a100_80g(),
        SimMode::Colocated,
        TrainingMode::Cpa,
    )
    .unwrap();
    let trace = generate_trace(&TraceSpec::new(0.2, 600.0, LengthDistribution::sharegpt_like()), 1).unwrap();
    let mut group = c.benchmark_group("run");
    group.sample_size(20);
    group.bench_function("colocated_cpa_600s", |b| {
        b.iter_batched(|| cfg.clone(), |cfg| run(&cfg, &trace).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, cost_model, maps, prefetch, short_run);
criterion_main!(benches);
