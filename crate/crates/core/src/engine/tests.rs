use super::*;
use crate::workload::{generate_trace, LabelDelay, LengthDistribution, TraceSpec};

fn config(mode: SimMode, training: TrainingMode) -> SimConfig {
    let mut cfg = SimConfig::new(ModelProfile::llama_8b(), GpuProfile::a100_80g(), mode, training).unwrap();
    cfg.record_events = true;
    cfg
}

fn query(id: u64, at: f64, prompt: u64, delay: Option<f64>) -> QueryRecord {
    QueryRecord {
        query_id: id,
        arrival_time: at,
        prompt_tokens: prompt,
        output_tokens: 128,
        label_delay: delay,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn empty_trace_reports_static_memory_only() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpa);
    let out = run(&cfg, &Trace::empty()).unwrap();
    let r = &out.report;
    assert!(r.tpt_samples.is_empty());
    assert_eq!(r.training.trained_tokens, 0);
    assert_eq!(r.memory.peak_device_bytes, 17_179_869_184 + 2_147_483_648);
    assert_eq!(r.training.training_throughput, None);
}

#[test]
fn single_cpt_query_trains_once_without_forward() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpt);
    let out = run(&cfg, &Trace::single(1000, 128, Some(0.01))).unwrap();
    let r = &out.report;
    assert_eq!(r.counters.jobs_completed, 1);
    assert_eq!(r.training.trained_tokens, 1000);
    // 32 layers of backward at 1.326 x 3.75 ms.
    assert!(close(r.training.training_busy_time, 32.0 * 0.00375 * 1.326));
    assert_eq!(r.tpt_samples.len(), 128);
    let prefill = out.events.records.iter().find(|e| e.kind == "prefill_done").unwrap();
    assert!(close(prefill.time, 0.1452));
    assert_eq!(out.events.count("backward_layer_done"), 32);
    assert_eq!(out.events.count("forward_layer_done"), 0);
    assert!(out.events.audit_exclusivity().is_empty());
}

#[test]
fn single_cpa_query_counts_prompt_and_both_responses() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpa);
    let out = run(&cfg, &Trace::single(2872, 128, Some(0.01))).unwrap();
    let r = &out.report;
    assert_eq!(r.counters.jobs_completed, 1);
    assert_eq!(r.training.trained_tokens, 2872 + 256);
    assert_eq!(out.events.count("forward_layer_done"), 64);
    assert_eq!(out.events.count("backward_layer_done"), 32);
    let m = ModelProfile::llama_8b();
    let expect = m.colocated_iteration(TrainingMode::Cpa, 2872, 128).unwrap();
    assert!((r.training.training_busy_time - expect).abs() < 1e-9);
    assert_eq!(r.memory.peak_activation_bytes, 3128 * 32 * 417_000);
    assert_eq!(r.memory.peak_cached_kv_bytes, 3128 * 524_288);
}

#[test]
fn separate_cluster_recomputes_forward() {
    let cfg = config(SimMode::SeparateCluster, TrainingMode::Cpt);
    let out = run(&cfg, &Trace::single(1000, 128, Some(0.01))).unwrap();
    let r = &out.report;
    assert_eq!(r.training.trained_tokens, 1000);
    assert!(close(r.training.training_busy_time, 0.120 * 2.326));
    let prefill = out.events.records.iter().find(|e| e.kind == "prefill_done").unwrap();
    assert!(close(prefill.time, 0.120));
}

#[test]
fn second_query_does_not_record_while_slot_is_held() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpa);
    let trace = Trace::new(vec![query(0, 0.0, 1000, Some(30.0)), query(1, 5.0, 1000, Some(0.01))]).unwrap();
    let out = run(&cfg, &trace).unwrap();
    assert_eq!(out.report.counters.recordings, 1);
    let prefills: Vec<bool> = out
        .events
        .records
        .iter()
        .filter(|e| e.kind == "prefill_done")
        .map(|e| e.payload["recording"].as_bool().unwrap())
        .collect();
    assert_eq!(prefills, vec![true, false]);
    assert_eq!(out.report.counters.jobs_completed, 1);
}

#[test]
fn missing_label_times_out_and_frees_the_slot() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpa);
    let trace = Trace::new(vec![query(0, 0.0, 1000, None), query(1, 100.0, 1000, Some(0.01))]).unwrap();
    let out = run(&cfg, &trace).unwrap();
    let r = &out.report;
    assert_eq!(r.counters.jobs_timed_out, 1);
    assert_eq!(r.counters.recordings, 2);
    assert_eq!(r.counters.jobs_completed, 1);
    let timeout = out.events.records.iter().find(|e| e.kind == "cache_timeout").unwrap();
    assert_eq!(timeout.time, 60.0);
}

#[test]
fn late_label_is_dropped() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpa);
    let out = run(&cfg, &Trace::single(1000, 128, Some(90.0))).unwrap();
    assert_eq!(out.report.counters.labels_dropped, 1);
    assert_eq!(out.report.counters.jobs_timed_out, 1);
    assert_eq!(out.report.training.trained_tokens, 0);
}

#[test]
fn arrival_mid_backward_pauses_at_layer_boundary() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpt);
    let m = ModelProfile::llama_8b();
    let first_done = m.prefill_latency(4000, 1, true).unwrap()
        + (1..=128).map(|s| m.decode_step_latency(4000 + s, 1, false).unwrap()).sum::<f64>();
    let layer = m.backward_layer_latency(4000).unwrap();
    let arrival = first_done + 10.5 * layer;
    let trace = Trace::new(vec![query(0, 0.0, 4000, None), query(1, arrival, 500, None)]).unwrap();
    let out = run(&cfg, &trace).unwrap();
    assert_eq!(out.report.counters.preemptions, 1);
    assert!(out.events.audit_exclusivity().is_empty());
    let second = out
        .events
        .records
        .iter()
        .filter(|e| e.kind == "prefill_done")
        .nth(1)
        .unwrap();
    let start = second.payload["start"].as_f64().unwrap();
    assert!(start - arrival <= layer + 1e-9, "delay {}", start - arrival);
    assert_eq!(out.report.counters.jobs_completed, 1);
}

#[test]
fn tpt_samples_match_generated_tokens_and_runs_are_deterministic() {
    let cfg = config(SimMode::Colocated, TrainingMode::Cpa);
    let mut spec = TraceSpec::new(0.3, 300.0, LengthDistribution::sharegpt_like());
    spec.label_delay = LabelDelay::Uniform { min: 0.0, max: 5.0 };
    let trace = generate_trace(&spec, 3).unwrap();
    let a = run(&cfg, &trace).unwrap();
    let b = run(&cfg, &trace).unwrap();
    assert_eq!(a.report.to_jsonl(), b.report.to_jsonl());
    assert_eq!(a.events.to_jsonl(), b.events.to_jsonl());
    let total: u64 = trace.records.iter().map(|r| r.output_tokens).sum();
    assert_eq!(a.report.tpt_samples.len() as u64, total);
    assert!(a.events.audit_exclusivity().is_empty());
}

#[test]
fn serving_only_matches_colocated_without_training() {
    let mut cfg = config(SimMode::Colocated, TrainingMode::Cpt);
    cfg.training_enabled = false;
    let spec = TraceSpec::new(0.2, 200.0, LengthDistribution::sharegpt_like());
    let trace = generate_trace(&spec, 8).unwrap();
    let a = run(&cfg, &trace).unwrap();
    let b = run(&cfg.with_mode(SimMode::SeparateCluster), &trace).unwrap();
    assert_eq!(a.report.tpt_samples, b.report.tpt_samples);
    assert_eq!(a.report.run.kind, RunKind::ServingOnly);
}

#[test]
fn stale_maps_are_refused() {
    let mut cfg = config(SimMode::Colocated, TrainingMode::Cpt);
    cfg.model.decode_coef_const = 0.03;
    assert!(matches!(run(&cfg, &Trace::empty()), Err(Error::ProfileMismatch { .. })));
}
