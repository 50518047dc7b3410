//! Property tests over randomized profiles, ledgers, prefetch instances and
//! short traces.

use proptest::prelude::*;

use reusesim::memory::{plan_prefetch_raw, AllocOutcome, Purpose};
use reusesim::metrics::{finalize, Counters, MemorySummary, RunData, RunInfo, RunKind};
use reusesim::{
    generate_trace, run, GpuProfile, GridSpec, HedgeDecision, HedgingMap, LabelDelay, LengthDistribution,
    MemoryLedger, MetricsReport, ModelProfile, OffloadDecision, OffloadingMap, SimConfig, SimMode, TraceSpec,
    TrainingMode,
};

const GIB: u64 = 1 << 30;

fn mode_strategy() -> impl Strategy<Value = TrainingMode> {
    prop_oneof![Just(TrainingMode::Cpt), Just(TrainingMode::Cpa)]
}

fn profiles() -> impl Strategy<Value = (ModelProfile, GpuProfile)> {
    (40u64..=160, 100_000u64..=900_000, 8u32..=48, 0.5f64..2.0).prop_map(|(cap_gib, act, layers, wf)| {
        let mut m = ModelProfile::llama_8b();
        m.act_bytes_per_token_per_layer = act;
        m.num_layers = layers;
        m.workspace_factor = wf;
        let mut g = GpuProfile::a100_80g();
        g.capacity_bytes = cap_gib * GIB;
        (m, g)
    })
}

fn coarse_grid() -> GridSpec {
    GridSpec {
        cached_step: 1000,
        incoming_step: 1000,
        batch_step: 10,
        max_cached: 8000,
        max_incoming: 8000,
        max_batch: 50,
    }
}

/// Headroom for serving with `freed` layers on host, restated from the
/// profile fields.
fn headroom(m: &ModelProfile, g: &GpuProfile, mode: TrainingMode, cached: u64, freed: u64) -> i128 {
    let l = m.num_layers as u64;
    let act = cached as i128 * m.act_bytes_per_token_per_layer as i128 * (l - freed) as i128;
    let kv = match mode {
        TrainingMode::Cpa => cached as i128 * m.kv_bytes_per_token as i128,
        TrainingMode::Cpt => 0,
    };
    g.capacity_bytes as i128 - m.weights_bytes as i128 - g.runtime_reserve_bytes as i128 - act - kv
}

fn need(m: &ModelProfile, incoming: u64, batch: u64) -> i128 {
    let kv = incoming * batch * m.kv_bytes_per_token;
    (kv + (m.workspace_factor * kv as f64).ceil() as u64) as i128
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn offloading_map_is_sufficient_and_minimal((m, g) in profiles(), mode in mode_strategy()) {
        let map = OffloadingMap::build(&m, &g, coarse_grid(), mode).unwrap();
        let l = m.num_layers as u64;
        for (cached, incoming, batch, d) in map.cells() {
            let n = need(&m, incoming, batch);
            match d {
                OffloadDecision::NoAction => prop_assert!(headroom(&m, &g, mode, cached, 0) >= n),
                OffloadDecision::FreeLayers(k) => {
                    let k = k as u64;
                    prop_assert!(k >= 1 && k <= l);
                    prop_assert!(headroom(&m, &g, mode, cached, k) >= n);
                    prop_assert!(headroom(&m, &g, mode, cached, k - 1) < n);
                }
                OffloadDecision::AllToHost => prop_assert!(
                    headroom(&m, &g, mode, cached, 0) < 0 || headroom(&m, &g, mode, cached, l) < n
                ),
            }
        }
    }

    #[test]
    fn offloading_map_is_monotone_in_every_axis((m, g) in profiles(), mode in mode_strategy()) {
        let grid = coarse_grid();
        let map = OffloadingMap::build(&m, &g, grid, mode).unwrap();
        let l = m.num_layers;
        let rank = |d: OffloadDecision| match d {
            OffloadDecision::AllToHost => l + 1,
            other => other.layers(l),
        };
        for c in (0..=grid.max_cached).step_by(grid.cached_step as usize) {
            for i in (grid.incoming_step..=grid.max_incoming).step_by(grid.incoming_step as usize) {
                for b in (grid.batch_step..=grid.max_batch).step_by(grid.batch_step as usize) {
                    let here = rank(map.lookup(c, i, b).unwrap());
                    if c + grid.cached_step <= grid.max_cached {
                        prop_assert!(rank(map.lookup(c + grid.cached_step, i, b).unwrap()) >= here);
                    }
                    if i + grid.incoming_step <= grid.max_incoming {
                        prop_assert!(rank(map.lookup(c, i + grid.incoming_step, b).unwrap()) >= here);
                    }
                    if b + grid.batch_step <= grid.max_batch {
                        prop_assert!(rank(map.lookup(c, i, b + grid.batch_step).unwrap()) >= here);
                    }
                }
            }
        }
    }

    #[test]
    fn hedging_map_recompute_is_upward_closed((m, g) in profiles(), mode in mode_strategy(), out in 1u64..512) {
        let map = HedgingMap::build(&m, &g, 500, 8000, mode, out).unwrap();
        let cells: Vec<_> = map.cells().collect();
        for w in cells.windows(2) {
            let ((c0, f0, d0), (c1, f1, d1)) = (w[0], w[1]);
            if c0 == c1 {
                prop_assert_eq!(f1, f0 + 1);
                prop_assert!(d0 != HedgeDecision::Recompute || d1 == HedgeDecision::Recompute);
            }
        }
        for (_, freed, d) in cells {
            if freed == 0 {
                prop_assert_eq!(d, HedgeDecision::LoadBack);
            }
        }
    }

    #[test]
    fn maps_roundtrip_through_text((m, g) in profiles(), mode in mode_strategy()) {
        let map = OffloadingMap::build(&m, &g, coarse_grid(), mode).unwrap();
        prop_assert_eq!(OffloadingMap::parse(&map.to_text(), "<mem>").unwrap(), map);
        let hedge = HedgingMap::build(&m, &g, 1000, 8000, mode, 128).unwrap();
        prop_assert_eq!(HedgingMap::parse(&hedge.to_text(), "<mem>").unwrap(), hedge);
    }
}

#[derive(Debug, Clone)]
enum LedgerOp {
    Alloc(u64, Purpose),
    Release(u64, Purpose),
}

fn purpose() -> impl Strategy<Value = Purpose> {
    prop_oneof![
        Just(Purpose::Serving),
        Just(Purpose::Activation),
        Just(Purpose::Kv),
        Just(Purpose::Load),
    ]
}

fn ledger_ops() -> impl Strategy<Value = Vec<LedgerOp>> {
    prop::collection::vec(
        prop_oneof![
            (0u64..40, purpose()).prop_map(|(b, p)| LedgerOp::Alloc(b, p)),
            (0u64..40, purpose()).prop_map(|(b, p)| LedgerOp::Release(b, p)),
        ],
        0..64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ledger_accounting_holds_under_any_sequence(cap in 1u64..200, ops in ledger_ops()) {
        let mut l = MemoryLedger::new(cap);
        let mut live = std::collections::HashMap::new();
        for op in ops {
            let before = l.clone();
            match op {
                LedgerOp::Alloc(bytes, p) => {
                    let oom = l.would_oom(bytes);
                    match l.allocate(bytes, p) {
                        AllocOutcome::Ok => {
                            prop_assert!(!oom);
                            *live.entry(p).or_insert(0u64) += bytes;
                        }
                        AllocOutcome::WouldOom => {
                            prop_assert!(oom);
                            prop_assert_eq!(&l, &before);
                        }
                    }
                }
                LedgerOp::Release(bytes, p) => {
                    let held = live.get(&p).copied().unwrap_or(0);
                    let r = l.release(bytes, p);
                    if bytes <= held {
                        prop_assert!(r.is_ok());
                        *live.entry(p).or_insert(0) -= bytes;
                    } else {
                        prop_assert!(r.is_err());
                        prop_assert_eq!(&l, &before);
                    }
                }
            }
            l.check().unwrap();
            prop_assert!(l.in_use() <= l.capacity());
            prop_assert!(l.allocated() <= l.capacity());
            prop_assert_eq!(l.in_use() + l.reserved(), l.allocated());
            prop_assert!(l.peak_allocated() >= l.allocated());
            let total: u64 = live.values().sum();
            prop_assert_eq!(l.in_use(), total);
        }
    }

    #[test]
    fn prefetch_wait_is_bounded(
        layers in 1u32..64,
        frac in 0.0f64..=1.0,
        load in 0.001f64..0.2,
        bwd in 0.001f64..0.2,
        start in 0.0f64..100.0,
    ) {
        let k = (layers as f64 * frac).round() as u32;
        let plan = plan_prefetch_raw(layers, k, load, start, bwd);
        let lower = (k as f64 * load - (layers - 1) as f64 * bwd).max(0.0);
        let eps = 1e-9 * (1.0 + start);
        prop_assert!(plan.total_wait + eps >= lower, "{} < {}", plan.total_wait, lower);
        prop_assert!(plan.total_wait <= k as f64 * load + eps);
        prop_assert_eq!(plan.loads.len(), k as usize);
        for w in plan.loads.windows(2) {
            prop_assert!(w[0].layer > w[1].layer);
            prop_assert!(w[1].load_start >= w[0].load_done);
        }
        for p in &plan.loads {
            prop_assert!(p.reach + p.wait + eps >= p.load_done);
        }
    }

    #[test]
    fn generated_traces_are_well_formed(
        qps in 0.05f64..5.0,
        duration in 1.0f64..200.0,
        min in prop::option::of(1u64..6000),
        seed in any::<u64>(),
    ) {
        let spec = TraceSpec::new(qps, duration, LengthDistribution::sharegpt_like().with_min_tokens(min));
        let t = generate_trace(&spec, seed).unwrap();
        prop_assert_eq!(&t, &generate_trace(&spec, seed).unwrap());
        for (i, q) in t.records.iter().enumerate() {
            prop_assert_eq!(q.query_id, i as u64);
            prop_assert!(q.arrival_time >= 0.0 && q.arrival_time < duration);
            prop_assert!(q.prompt_tokens >= min.unwrap_or(1));
        }
        prop_assert!(t.records.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    }

    #[test]
    fn reports_roundtrip_through_both_formats(
        samples in prop::collection::vec(0.0f64..1.0, 0..50),
        tokens in any::<u32>(),
        busy in 0.0f64..1e4,
        seed in any::<u64>(),
        freed in any::<u32>(),
    ) {
        let report = finalize(RunData {
            run: RunInfo {
                kind: RunKind::Colocated,
                training_mode: TrainingMode::Cpa,
                trace_id: format!("{seed:016x}"),
                trace_seed: seed,
                queries: samples.len() as u64,
            },
            tpt_samples: samples,
            trained_tokens: tokens as u64,
            training_busy_time: busy,
            serving_busy_time: busy / 3.0,
            makespan: busy * 2.0,
            oom_flag: seed % 2 == 0,
            memory: MemorySummary {
                peak_device_bytes: seed / 3,
                training_device_peak_bytes: (seed % 3 == 0).then_some(seed / 7),
                ..MemorySummary::default()
            },
            counters: Counters { layers_freed: freed as u64, copy_stall_seconds: busy / 7.0, ..Counters::default() },
        });
        prop_assert_eq!(&MetricsReport::from_csv(&report.to_csv()).unwrap(), &report);
        prop_assert_eq!(&MetricsReport::from_jsonl(&report.to_jsonl()).unwrap(), &report);
    }
}

fn label_delay() -> impl Strategy<Value = LabelDelay> {
    prop_oneof![
        (0.0f64..5.0).prop_map(LabelDelay::Fixed),
        (0.0f64..80.0).prop_map(|max| LabelDelay::Uniform { min: 0.0, max }),
        Just(LabelDelay::Never),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Short colocated runs: no ledger breach, one TPT sample per generated
    /// token, no serving/training overlap, and the layer counters agree.
    #[test]
    fn colocated_runs_keep_their_invariants(
        mode in mode_strategy(),
        qps in 0.02f64..3.0,
        duration in 10.0f64..300.0,
        min in prop::option::of(1000u64..5000),
        output in 1u64..256,
        delay in label_delay(),
        seed in any::<u64>(),
    ) {
        let mut cfg = SimConfig::new(ModelProfile::llama_8b(), GpuProfile::a100_80g(), SimMode::Colocated, mode).unwrap();
        cfg.record_events = true;
        let mut spec = TraceSpec::new(qps, duration, LengthDistribution::sharegpt_like().with_min_tokens(min));
        spec.output_tokens = output;
        spec.label_delay = delay;
        let trace = generate_trace(&spec, seed).unwrap();
        let out = run(&cfg, &trace).unwrap();
        let r = &out.report;
        let tokens: u64 = trace.records.iter().map(|q| q.output_tokens).sum();
        prop_assert_eq!(r.tpt_samples.len() as u64, tokens);
        prop_assert!(out.events.audit_exclusivity().is_empty());
        let c = &r.counters;
        prop_assert!(c.layers_freed >= c.loads + c.layers_dropped_by_recompute);
        prop_assert!(r.memory.peak_device_bytes <= cfg.gpu.capacity_bytes);
        prop_assert_eq!(c.queries_served, trace.len() as u64);
        prop_assert!(c.jobs_completed + c.jobs_timed_out <= c.recordings);
    }
}
