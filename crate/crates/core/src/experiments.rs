//! Sweeps and paired comparisons shared by the CLI and the acceptance suite.
//!
//! Each helper runs one or more simulations from a base [`SimConfig`] and
//! returns plain serializable rows. Nothing here writes files.

use serde::{Deserialize, Serialize};

use crate::cost::{GpuProfile, ModelProfile, TrainingMode};
use crate::engine::{run, RunOutput, SimConfig, SimMode};
use crate::error::{Error, Result};
use crate::metrics::{nearest_rank, MetricsReport};
use crate::workload::{generate_trace, Trace, TraceSpec, DEFAULT_LABEL_DELAY};

/// Runs a one-query trace whose label arrives right after generation.
pub fn run_single(cfg: &SimConfig, mode: SimMode, prompt: u64, output: u64) -> Result<MetricsReport> {
    let trace = Trace::single(prompt, output, Some(DEFAULT_LABEL_DELAY));
    Ok(run(&cfg.with_mode(mode), &trace)?.report)
}

/// Uncontended training throughput at one prompt length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPoint {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    /// Tokens per second; `None` when the sample did not train.
    pub colocated: Option<f64>,
    pub baseline: Option<f64>,
    pub ratio: Option<f64>,
    /// Same ratio straight from the cost model, memory ignored.
    pub analytic_ratio: f64,
    pub colocated_oom: bool,
    pub baseline_oom: bool,
}

fn trained(report: &MetricsReport) -> bool {
    report.counters.jobs_completed > 0
}

pub fn throughput_point(cfg: &SimConfig, prompt: u64, output: u64) -> Result<ThroughputPoint> {
    let colo = run_single(cfg, SimMode::Colocated, prompt, output)?;
    let base = run_single(cfg, SimMode::SeparateCluster, prompt, output)?;
    let m = &cfg.model;
    let mode = cfg.training_mode;
    let analytic_ratio = m.baseline_iteration(mode, prompt, output)? / m.colocated_iteration(mode, prompt, output)?;
    let colocated = colo.training.training_throughput.filter(|_| trained(&colo));
    let baseline = base.training.training_throughput.filter(|_| trained(&base));
    Ok(ThroughputPoint {
        prompt_tokens: prompt,
        output_tokens: output,
        colocated,
        baseline,
        ratio: colocated.zip(baseline).map(|(a, b)| a / b),
        analytic_ratio,
        colocated_oom: colo.counters.jobs_oom > 0,
        baseline_oom: base.counters.jobs_oom > 0,
    })
}

pub fn token_length_sweep(cfg: &SimConfig, lengths: &[u64], output: u64) -> Result<Vec<ThroughputPoint>> {
    if lengths.is_empty() {
        return Err(Error::invalid("token-length sweep", "no lengths given"));
    }
    lengths.iter().map(|&p| throughput_point(cfg, p, output)).collect()
}

/// Largest prompt length in `[0, upper]` whose single-query run completes a
/// training job under `mode`. Feasibility is monotone in the length, so a
/// binary search suffices.
pub fn max_trainable_tokens(cfg: &SimConfig, mode: SimMode, output: u64, upper: u64) -> Result<u64> {
    let fits = |p: u64| -> Result<bool> { Ok(trained(&run_single(cfg, mode, p, output)?)) };
    if fits(upper)? {
        return Ok(upper);
    }
    // Invariant: lo fits (or is 0), hi does not.
    let (mut lo, mut hi) = (0u64, upper);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Colocated and baseline max trainable lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxTokens {
    pub colocated: u64,
    pub baseline: u64,
    pub ratio: Option<f64>,
}

pub fn max_tokens_comparison(cfg: &SimConfig, output: u64, upper: u64) -> Result<MaxTokens> {
    let colocated = max_trainable_tokens(cfg, SimMode::Colocated, output, upper)?;
    let baseline = max_trainable_tokens(cfg, SimMode::SeparateCluster, output, upper)?;
    let ratio = (baseline > 0).then(|| colocated as f64 / baseline as f64);
    Ok(MaxTokens { colocated, baseline, ratio })
}

/// Peak training-activation footprint, colocated vs baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub colocated_bytes: u64,
    pub baseline_bytes: u64,
    /// `1 - colocated / baseline` as measured.
    pub saving: f64,
    /// `P / (2 (P + R))`.
    pub closed_form: f64,
}

/// Measures footprint demand, so the device is enlarged until both runs fit.
/// The ratio does not depend on capacity.
pub fn memory_point(cfg: &SimConfig, prompt: u64, output: u64) -> Result<MemoryPoint> {
    let m = &cfg.model;
    let need = m.baseline_activation_footprint(cfg.training_mode, prompt, output)
        + m.colocated_activation_footprint(cfg.training_mode, prompt, output)
        + m.cached_kv_bytes(cfg.training_mode, prompt + 2 * output)
        + m.serving_memory(prompt + output, 1)?;
    let mut gpu = cfg.gpu.clone();
    gpu.capacity_bytes = gpu.capacity_bytes.max(crate::cost::static_bytes(m, &gpu) + need);
    let big = with_profiles(cfg, cfg.model.clone(), gpu)?;
    let colo = run_single(&big, SimMode::Colocated, prompt, output)?;
    let base = run_single(&big, SimMode::SeparateCluster, prompt, output)?;
    if !trained(&colo) || !trained(&base) {
        return Err(Error::InvariantBreach {
            time: 0.0,
            event: "memory_comparison".into(),
            detail: format!("({prompt}, {output}) did not train on the enlarged device"),
        });
    }
    let colocated_bytes = colo.memory.peak_activation_bytes;
    let baseline_bytes = base.memory.peak_activation_bytes;
    Ok(MemoryPoint {
        prompt_tokens: prompt,
        output_tokens: output,
        colocated_bytes,
        baseline_bytes,
        saving: 1.0 - colocated_bytes as f64 / baseline_bytes as f64,
        closed_form: prompt as f64 / (2.0 * (prompt + output) as f64),
    })
}

/// A copy of `cfg` with new profiles and freshly built maps.
pub fn with_profiles(cfg: &SimConfig, model: ModelProfile, gpu: GpuProfile) -> Result<SimConfig> {
    let mut fresh = SimConfig::new(model, gpu, cfg.mode, cfg.training_mode)?;
    fresh.training_enabled = cfg.training_enabled;
    fresh.cache_timeout = cfg.cache_timeout;
    fresh.max_batch = cfg.max_batch;
    fresh.baseline_budget = cfg.baseline_budget;
    fresh.record_events = cfg.record_events;
    Ok(fresh)
}

/// Tokens per second the baseline would reach on this trace with unlimited
/// training memory: every labelled query trained back to back.
pub fn unbounded_baseline_throughput(model: &ModelProfile, mode: TrainingMode, trace: &Trace) -> Result<Option<f64>> {
    let (mut tokens, mut time) = (0u64, 0.0f64);
    for q in trace.records.iter().filter(|q| q.label_delay.is_some() || mode == TrainingMode::Cpt) {
        tokens += model.trained_tokens(mode, q.prompt_tokens, q.output_tokens);
        time += model.baseline_iteration(mode, q.prompt_tokens, q.output_tokens)?;
    }
    Ok((time > 0.0).then(|| tokens as f64 / time))
}

/// One QPS sweep point: colocated and baseline on the same trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpsPoint {
    pub qps: f64,
    pub seed: u64,
    pub colocated: MetricsReport,
    pub baseline: MetricsReport,
    pub unbounded_baseline_throughput: Option<f64>,
}

pub fn qps_point(cfg: &SimConfig, spec: &TraceSpec, seed: u64) -> Result<QpsPoint> {
    let trace = generate_trace(spec, seed)?;
    let colocated = run(&cfg.with_mode(SimMode::Colocated), &trace)?.report;
    let baseline = run(&cfg.with_mode(SimMode::SeparateCluster), &trace)?.report;
    Ok(QpsPoint {
        qps: spec.qps,
        seed,
        colocated,
        baseline,
        unbounded_baseline_throughput: unbounded_baseline_throughput(&cfg.model, cfg.training_mode, &trace)?,
    })
}

/// Runs [`qps_point`] for each rate with a shared seed.
pub fn qps_sweep(cfg: &SimConfig, spec: &TraceSpec, rates: &[f64], seed: u64) -> Result<Vec<QpsPoint>> {
    if rates.is_empty() {
        return Err(Error::invalid("qps sweep", "no rates given"));
    }
    rates
        .iter()
        .map(|&qps| qps_point(cfg, &TraceSpec { qps, ..spec.clone() }, seed))
        .collect()
}

/// Longest single training step any query in `trace` can produce, plus the
/// per-token share of its prefill recording overhead.
pub fn preemption_bound(model: &ModelProfile, mode: TrainingMode, trace: &Trace) -> Result<f64> {
    let l = model.num_layers as f64;
    let mut bound = 0.0f64;
    for q in &trace.records {
        let (p, r) = (q.prompt_tokens, q.output_tokens);
        let c = model.activation_tokens(mode, p, r);
        let mut step = model
            .backward_layer_latency(c)?
            .max(model.prefill_latency(p, 1, false)? / l)
            .max(model.recompute_time(mode, c, r)? / l);
        if mode == TrainingMode::Cpa {
            step = step.max(model.extend_latency(p, r)? / l);
        }
        let plain = model.prefill_latency(p, 1, false)?;
        let recording = model.prefill_latency(p, 1, true)? - plain;
        bound = bound.max(step + recording / r as f64);
    }
    Ok(bound)
}

/// Serving latency with and without colocated training on one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TptComparison {
    pub serving_only: MetricsReport,
    pub colocated: MetricsReport,
    /// `colocated mean / serving-only mean - 1`.
    pub mean_increase: Option<f64>,
    pub p99_shift: Option<f64>,
    pub preemption_bound: f64,
}

pub fn tpt_comparison(cfg: &SimConfig, trace: &Trace) -> Result<TptComparison> {
    let mut serving = cfg.with_mode(SimMode::Colocated);
    serving.training_enabled = false;
    let serving_only = run(&serving, trace)?.report;
    let colocated = run(&cfg.with_mode(SimMode::Colocated), trace)?.report;
    let mean_increase = colocated
        .latency
        .mean
        .zip(serving_only.latency.mean)
        .map(|(a, b)| a / b - 1.0);
    let p99 = |r: &MetricsReport| {
        let mut s = r.tpt_samples.clone();
        s.sort_by(f64::total_cmp);
        nearest_rank(&s, 99.0)
    };
    let p99_shift = p99(&colocated).zip(p99(&serving_only)).map(|(a, b)| a - b);
    Ok(TptComparison {
        preemption_bound: preemption_bound(&cfg.model, cfg.training_mode, trace)?,
        serving_only,
        colocated,
        mean_increase,
        p99_shift,
    })
}

/// Runs `cfg` on `trace` twice and reports whether reports and event logs
/// match byte for byte.
pub fn replay_is_identical(cfg: &SimConfig, trace: &Trace) -> Result<bool> {
    let mut cfg = cfg.clone();
    cfg.record_events = true;
    let render = |o: RunOutput| (o.report.to_jsonl(), o.events.to_jsonl());
    let a = render(run(&cfg, trace)?);
    let b = render(run(&cfg, trace)?);
    Ok(a == b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: TrainingMode) -> SimConfig {
        SimConfig::new(ModelProfile::llama_8b(), GpuProfile::a100_80g(), SimMode::Colocated, mode).unwrap()
    }

    #[test]
    fn cpt_ratio_is_backward_share_inverse() {
        let p = throughput_point(&cfg(TrainingMode::Cpt), 1000, 128).unwrap();
        // (1 + rho) / rho
        assert!((p.analytic_ratio - 2.326 / 1.326).abs() < 1e-12);
        assert!((p.ratio.unwrap() - p.analytic_ratio).abs() < 1e-9);
    }

    #[test]
    fn empty_sweeps_are_rejected() {
        let c = cfg(TrainingMode::Cpt);
        assert!(token_length_sweep(&c, &[], 128).is_err());
        let spec = TraceSpec::new(1.0, 10.0, crate::workload::LengthDistribution::fixed(500));
        assert!(qps_sweep(&c, &spec, &[], 1).is_err());
    }

    #[test]
    fn memory_saving_matches_closed_form() {
        let p = memory_point(&cfg(TrainingMode::Cpa), 872, 128).unwrap();
        assert!((p.saving - p.closed_form).abs() < 1e-12);
    }
}
