//! Deterministic discrete-event simulation of one serving device.
//!
//! The colocated mode runs serving and training on the same device: single
//! query prefills record activations into a one-slot cache, training steps run
//! one layer at a time only while serving is idle, and every new serving batch
//! first consults the offloading and hedging maps. The separate-cluster mode
//! serves without recording and trains on an independent device that
//! recomputes everything.

mod log;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use serde_json::{json, Value};

pub use self::log::{ComputeInterval, EventLog, EventRecord, Overlap};
use crate::cost::{static_bytes, validate_pair, Direction, GpuProfile, ModelProfile, TrainingMode};
use crate::error::{Error, Result};
use crate::memory::{ActivationStore, AllocOutcome, MemoryLedger, Purpose, Residency, StreamMode, TransferChannel};
use crate::metrics::{finalize, Counters, MemorySummary, MetricsReport, RunData, RunInfo, RunKind};
use crate::profiler::{GridSpec, HedgeDecision, HedgingMap, OffloadDecision, OffloadingMap};
use crate::workload::{QueryRecord, Trace, DEFAULT_OUTPUT_TOKENS};

pub const DEFAULT_CACHE_TIMEOUT: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Colocated,
    SeparateCluster,
}

/// Everything a run needs apart from the trace.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub mode: SimMode,
    pub training_mode: TrainingMode,
    /// With training off, a colocated run is a pure serving reference.
    pub training_enabled: bool,
    pub model: ModelProfile,
    pub gpu: GpuProfile,
    pub offloading_map: Arc<OffloadingMap>,
    pub hedging_map: Arc<HedgingMap>,
    /// Seconds a cached sample may wait for its label.
    pub cache_timeout: f64,
    pub max_batch: u64,
    /// Separate-cluster only: stop starting training jobs once this much
    /// training time has been spent.
    pub baseline_budget: Option<f64>,
    pub record_events: bool,
}

impl SimConfig {
    /// Default grid and knobs, with maps built for `model` and `gpu`.
    pub fn new(model: ModelProfile, gpu: GpuProfile, mode: SimMode, training_mode: TrainingMode) -> Result<Self> {
        let grid = GridSpec::default();
        let offloading_map = OffloadingMap::build(&model, &gpu, grid, training_mode)?;
        let hedging_map = HedgingMap::build(
            &model,
            &gpu,
            grid.cached_step,
            grid.max_cached,
            training_mode,
            DEFAULT_OUTPUT_TOKENS,
        )?;
        Ok(SimConfig {
            mode,
            training_mode,
            training_enabled: true,
            model,
            gpu,
            offloading_map: Arc::new(offloading_map),
            hedging_map: Arc::new(hedging_map),
            cache_timeout: DEFAULT_CACHE_TIMEOUT,
            max_batch: grid.max_batch,
            baseline_budget: None,
            record_events: false,
        })
    }

    pub fn with_mode(&self, mode: SimMode) -> Self {
        SimConfig { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gpu.validate()?;
        validate_pair(&self.model, &self.gpu)?;
        self.offloading_map.check_profiles(&self.model, &self.gpu)?;
        self.hedging_map.check_profiles(&self.model, &self.gpu)?;
        for (what, mode) in [
            ("offloading map", self.offloading_map.training_mode),
            ("hedging map", self.hedging_map.training_mode),
        ] {
            if mode != self.training_mode {
                return Err(Error::invalid(
                    what,
                    format!("built for {mode}, run uses {}", self.training_mode),
                ));
            }
        }
        if self.max_batch == 0 {
            return Err(Error::invalid("sim config", "max_batch must be >= 1"));
        }
        if !(self.cache_timeout.is_finite() && self.cache_timeout > 0.0) {
            return Err(Error::invalid("sim config", "cache_timeout must be positive"));
        }
        Ok(())
    }

    fn kind(&self) -> RunKind {
        match (self.mode, self.training_enabled) {
            (_, false) => RunKind::ServingOnly,
            (SimMode::Colocated, true) => RunKind::Colocated,
            (SimMode::SeparateCluster, true) => RunKind::SeparateCluster,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// Empty unless `record_events` was set.
    pub events: EventLog,
}

/// Simulates `trace` under `config`.
pub fn run(config: &SimConfig, trace: &Trace) -> Result<RunOutput> {
    config.validate()?;
    let mut engine = Engine::new(config, trace)?;
    engine.run()?;
    Ok(engine.finish())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Arrival(usize),
    PrefillDone,
    DecodeStepDone,
    LabelArrival { job: u64 },
    CacheTimeout { job: u64 },
    StepDone,
    LoadDone { load: u64, layer: u32 },
    CopyDone { job: u64, layer: u32, version: u32 },
}

struct Scheduled {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct Batch {
    members: Vec<QueryRecord>,
    max_prompt: u64,
    steps_done: u64,
    max_steps: u64,
    serving_bytes: u64,
    recording: bool,
    step_start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// Prefill of the source query is still running.
    Recording,
    WaitingLabel,
    /// CPA response forward; `pass` is 0 or 1.
    Forward { pass: u8, layer: u32 },
    /// Rebuilding dropped activations for layers `0..=until`.
    Recompute { layer: u32, until: u32 },
    Backward { layer: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepKind {
    KvRebuild,
    Forward,
    Recompute,
    Backward,
}

impl StepKind {
    fn event_name(self) -> &'static str {
        match self {
            StepKind::Backward => "backward_layer_done",
            _ => "forward_layer_done",
        }
    }

    fn label(self) -> &'static str {
        match self {
            StepKind::KvRebuild => "kv_rebuild",
            StepKind::Forward => "response_forward",
            StepKind::Recompute => "recompute",
            StepKind::Backward => "backward",
        }
    }
}

struct RunningStep {
    kind: StepKind,
    layer: u32,
    start: f64,
}

struct Load {
    id: u64,
    layer: u32,
    end: f64,
}

struct Job {
    id: u64,
    query_id: u64,
    prompt: u64,
    output: u64,
    store: ActivationStore,
    stage: Stage,
    /// Cached-sample KV bytes currently allocated (CPA).
    kv_held: u64,
    kv_ready: bool,
    kv_rebuild_layer: u32,
    running: Option<RunningStep>,
    load: Option<Load>,
    wait_since: Option<f64>,
}

impl Job {
    fn runnable(&self) -> bool {
        !matches!(self.stage, Stage::Recording | Stage::WaitingLabel)
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    trace: &'a Trace,
    l: u32,
    static_bytes: u64,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    ledger: MemoryLedger,
    d2h: TransferChannel,
    h2d: TransferChannel,
    queue: VecDeque<usize>,
    batch: Option<Batch>,
    job: Option<Job>,
    next_job_id: u64,
    next_load_id: u64,
    training_active: bool,
    log: EventLog,
    // measurements
    tpt: Vec<f64>,
    trained_tokens: u64,
    training_busy: f64,
    serving_busy: f64,
    last_activity: f64,
    peak_in_use: u64,
    peak_activation: u64,
    peak_kv: u64,
    counters: Counters,
    // separate-cluster training device
    baseline_free_at: f64,
    baseline_peak: Option<u64>,
    oom_flag: bool,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, trace: &'a Trace) -> Result<Self> {
        let mut ledger = MemoryLedger::new(cfg.gpu.capacity_bytes);
        let fixed = static_bytes(&cfg.model, &cfg.gpu);
        if ledger.allocate(fixed, Purpose::Static) == AllocOutcome::WouldOom {
            return Err(Error::invalid("profile pair", "weights and reserve exceed capacity"));
        }
        let mut engine = Engine {
            cfg,
            trace,
            l: cfg.model.num_layers,
            static_bytes: fixed,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            ledger,
            d2h: TransferChannel::default(),
            h2d: TransferChannel::default(),
            queue: VecDeque::new(),
            batch: None,
            job: None,
            next_job_id: 0,
            next_load_id: 0,
            training_active: false,
            log: EventLog::default(),
            tpt: Vec::new(),
            trained_tokens: 0,
            training_busy: 0.0,
            serving_busy: 0.0,
            last_activity: 0.0,
            peak_in_use: fixed,
            peak_activation: 0,
            peak_kv: 0,
            counters: Counters::default(),
            baseline_free_at: 0.0,
            baseline_peak: None,
            oom_flag: false,
        };
        for (i, r) in trace.records.iter().enumerate() {
            engine.schedule(r.arrival_time, Ev::Arrival(i));
        }
        Ok(engine)
    }

    fn colocated_training(&self) -> bool {
        self.cfg.mode == SimMode::Colocated && self.cfg.training_enabled
    }

    fn schedule(&mut self, time: f64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Scheduled { time, seq, ev });
    }

    fn log(&mut self, kind: &str, payload: Value) {
        if !self.cfg.record_events {
            return;
        }
        let seq = self.seq;
        self.seq += 1;
        self.log.records.push(EventRecord {
            time: self.now,
            seq,
            kind: kind.to_string(),
            payload,
        });
    }

    fn breach(&self, event: &str, detail: impl Into<String>) -> Error {
        Error::InvariantBreach {
            time: self.now,
            event: event.to_string(),
            detail: detail.into(),
        }
    }

    fn alloc(&mut self, bytes: u64, purpose: Purpose, event: &str) -> Result<()> {
        if self.ledger.allocate(bytes, purpose) == AllocOutcome::WouldOom {
            return Err(self.breach(
                event,
                format!(
                    "allocating {bytes} {purpose:?} bytes with {} of {} in use",
                    self.ledger.in_use(),
                    self.ledger.capacity()
                ),
            ));
        }
        self.note_peaks();
        Ok(())
    }

    fn release(&mut self, bytes: u64, purpose: Purpose, event: &str) -> Result<()> {
        self.ledger
            .release(bytes, purpose)
            .map_err(|e| self.breach(event, e.to_string()))
    }

    fn note_peaks(&mut self) {
        self.peak_in_use = self.peak_in_use.max(self.ledger.in_use());
        let acts = self.ledger.live_for(Purpose::Activation) + self.ledger.live_for(Purpose::Load);
        self.peak_activation = self.peak_activation.max(acts);
        self.peak_kv = self.peak_kv.max(self.ledger.live_for(Purpose::Kv));
    }

    fn run(&mut self) -> Result<()> {
        while let Some(Scheduled { time, seq, ev }) = self.heap.pop() {
            self.now = time;
            let name = self.handle(seq, ev)?;
            self.ledger.check().map_err(|e| self.breach(name, e.to_string()))?;
            if let Some(job) = &self.job {
                job.store.check_prefix().map_err(|e| self.breach(name, e.to_string()))?;
            }
            self.advance()?;
        }
        Ok(())
    }

    fn handle(&mut self, seq: u64, ev: Ev) -> Result<&'static str> {
        let logging = self.cfg.record_events;
        let record = |this: &mut Self, kind: &'static str, payload: Value| {
            if logging {
                this.log.records.push(EventRecord {
                    time: this.now,
                    seq,
                    kind: kind.to_string(),
                    payload,
                });
            }
            kind
        };
        match ev {
            Ev::Arrival(i) => {
                let r = &self.trace.records[i];
                let payload = json!({ "query_id": r.query_id, "prompt_tokens": r.prompt_tokens });
                self.queue.push_back(i);
                Ok(record(self, "query_arrival", payload))
            }
            Ev::PrefillDone => {
                let start = self.batch.as_ref().map_or(self.now, |b| b.step_start);
                let (ids, recording) = {
                    let b = self.batch.as_ref().expect("prefill without batch");
                    (b.members.iter().map(|m| m.query_id).collect::<Vec<_>>(), b.recording)
                };
                self.last_activity = self.now;
                if recording {
                    self.finish_recording();
                }
                let payload = json!({ "work": "serving", "start": start, "end": self.now, "queries": ids, "recording": recording });
                let kind = record(self, "prefill_done", payload);
                self.start_decode_step()?;
                Ok(kind)
            }
            Ev::DecodeStepDone => {
                let start = self.batch.as_ref().map_or(self.now, |b| b.step_start);
                self.last_activity = self.now;
                let payload = json!({ "work": "serving", "start": start, "end": self.now });
                let kind = record(self, "decode_step_done", payload);
                self.on_decode_step_done()?;
                Ok(kind)
            }
            Ev::LabelArrival { job } => {
                let accepted = match &mut self.job {
                    Some(j) if j.id == job && j.stage == Stage::WaitingLabel => {
                        j.stage = Stage::Forward { pass: 0, layer: 0 };
                        j.store.label_ready_at = Some(self.now);
                        true
                    }
                    _ => false,
                };
                if !accepted {
                    self.counters.labels_dropped += 1;
                    ::log::debug!("label for job {job} arrived after its slot was cleared");
                }
                Ok(record(self, "label_arrival", json!({ "job": job, "accepted": accepted })))
            }
            Ev::CacheTimeout { job } => {
                let expired = matches!(&self.job, Some(j) if j.id == job && j.stage == Stage::WaitingLabel);
                if expired {
                    self.clear_job("cache_timeout")?;
                    self.counters.jobs_timed_out += 1;
                }
                Ok(record(self, "cache_timeout", json!({ "job": job, "expired": expired })))
            }
            Ev::StepDone => {
                let (kind, layer, start) = {
                    let j = self.job.as_mut().expect("step without job");
                    let s = j.running.take().expect("step done without running step");
                    (s.kind, s.layer, s.start)
                };
                self.training_busy += self.now - start;
                self.last_activity = self.now;
                let payload = json!({ "work": "training", "start": start, "end": self.now, "step": kind.label(), "layer": layer });
                let name = record(self, kind.event_name(), payload);
                self.on_step_done(kind, layer)?;
                Ok(name)
            }
            Ev::LoadDone { load, layer } => {
                let current = matches!(&self.job, Some(j) if j.load.as_ref().is_some_and(|l| l.id == load));
                if current {
                    let j = self.job.as_mut().expect("checked");
                    j.load = None;
                    j.store
                        .complete_load(&mut self.ledger, layer)
                        .map_err(|e| Error::InvariantBreach {
                            time: self.now,
                            event: "load_done".into(),
                            detail: e.to_string(),
                        })?;
                    self.counters.loads += 1;
                    self.note_peaks();
                }
                Ok(record(self, "load_done", json!({ "layer": layer, "current": current })))
            }
            Ev::CopyDone { job, layer, version } => {
                if let Some(j) = self.job.as_mut().filter(|j| j.id == job) {
                    j.store.mark_copied(layer, version);
                }
                Ok(record(self, "copy_done", json!({ "job": job, "layer": layer })))
            }
        }
    }

    /// Starts whatever work the device should do next: serving first, then
    /// training when serving is idle.
    fn advance(&mut self) -> Result<()> {
        if self.batch.is_some() {
            return Ok(());
        }
        if self.job.as_ref().is_some_and(|j| j.running.is_some()) {
            // Preemption hook: the in-flight layer finishes first. Prefetch
            // keeps going underneath it unless serving is waiting.
            if self.queue.is_empty() {
                self.start_load_if_idle()?;
            }
            return Ok(());
        }
        if !self.queue.is_empty() {
            return self.form_batch();
        }
        if !self.colocated_training() {
            return Ok(());
        }
        self.advance_training()
    }

    // ---- serving ----

    fn form_batch(&mut self) -> Result<()> {
        let avail = self.cfg.gpu.capacity_bytes - self.static_bytes;
        let mut members: Vec<QueryRecord> = Vec::new();
        let mut max_ctx = 0;
        while let Some(&i) = self.queue.front() {
            if members.len() as u64 >= self.cfg.max_batch {
                break;
            }
            let r = &self.trace.records[i];
            let ctx = max_ctx.max(r.prompt_tokens + r.output_tokens);
            let need = self.cfg.model.serving_memory(ctx, members.len() as u64 + 1)?;
            if need > avail {
                if members.is_empty() {
                    return Err(Error::invalid(
                        format!("query {}", r.query_id),
                        "serving memory alone exceeds device capacity",
                    ));
                }
                break;
            }
            max_ctx = ctx;
            members.push(r.clone());
            self.queue.pop_front();
        }
        let n = members.len() as u64;
        let max_prompt = members.iter().map(|m| m.prompt_tokens).max().unwrap_or(1);
        let max_steps = members.iter().map(|m| m.output_tokens).max().unwrap_or(1);
        let serving_bytes = self.cfg.model.serving_memory(max_ctx, n)?;

        self.preempt_training()?;

        let mut start = self.now;
        let mut recording = false;
        if self.job.is_some() {
            start = self.apply_offload(max_ctx, n)?;
        } else if n == 1 && self.colocated_training() {
            recording = self.try_admit(&members[0])?;
        }
        self.alloc(serving_bytes, Purpose::Serving, "prefill_start")?;
        let prefill = self.cfg.model.prefill_latency(max_prompt, n, recording)?;
        self.serving_busy += prefill;
        self.counters.batches += 1;
        let ids: Vec<u64> = members.iter().map(|m| m.query_id).collect();
        self.log("prefill_start", json!({ "queries": ids, "start": start, "recording": recording }));
        self.batch = Some(Batch {
            members,
            max_prompt,
            steps_done: 0,
            max_steps,
            serving_bytes,
            recording,
            step_start: start,
        });
        if recording {
            self.start_recording(start, prefill)?;
        }
        self.schedule(start + prefill, Ev::PrefillDone);
        Ok(())
    }

    fn start_decode_step(&mut self) -> Result<()> {
        let b = self.batch.as_mut().expect("decode without batch");
        let step = b.steps_done + 1;
        let active = b.members.iter().filter(|m| m.output_tokens >= step).count() as u64;
        let ctx = b.max_prompt + step;
        let latency = self.cfg.model.decode_step_latency(ctx, active, false)?;
        b.step_start = self.now;
        self.serving_busy += latency;
        self.schedule(self.now + latency, Ev::DecodeStepDone);
        Ok(())
    }

    fn on_decode_step_done(&mut self) -> Result<()> {
        let (latency, done_ids, finished) = {
            let b = self.batch.as_mut().expect("decode without batch");
            b.steps_done += 1;
            let step = b.steps_done;
            let latency = self.now - b.step_start;
            let mut done = Vec::new();
            for m in &b.members {
                if m.output_tokens >= step {
                    self.tpt.push(latency);
                }
                if m.output_tokens == step {
                    done.push((m.query_id, m.label_delay, m.prompt_tokens, m.output_tokens));
                }
            }
            (latency, done, step >= b.max_steps)
        };
        let _ = latency;
        for (qid, delay, prompt, output) in done_ids {
            self.counters.queries_served += 1;
            self.log("query_done", json!({ "query_id": qid }));
            self.on_query_done(qid, delay, prompt, output)?;
        }
        if finished {
            let b = self.batch.take().expect("batch");
            self.release(b.serving_bytes, Purpose::Serving, "batch_done")?;
        } else {
            self.start_decode_step()?;
        }
        Ok(())
    }

    fn on_query_done(&mut self, qid: u64, delay: Option<f64>, prompt: u64, output: u64) -> Result<()> {
        match self.cfg.mode {
            SimMode::Colocated => {
                let Some(j) = self.job.as_ref().filter(|j| j.query_id == qid) else {
                    return Ok(());
                };
                if j.stage == Stage::WaitingLabel {
                    if let Some(d) = delay {
                        let id = j.id;
                        self.schedule(self.now + d, Ev::LabelArrival { job: id });
                    }
                }
            }
            SimMode::SeparateCluster if self.cfg.training_enabled => {
                let ready = match self.cfg.training_mode {
                    TrainingMode::Cpt => Some(self.now),
                    TrainingMode::Cpa => delay.map(|d| self.now + d),
                };
                if let Some(ready) = ready {
                    self.baseline_train(qid, prompt, output, ready)?;
                }
            }
            SimMode::SeparateCluster => {}
        }
        Ok(())
    }

    // ---- separate-cluster training ----

    fn baseline_train(&mut self, qid: u64, prompt: u64, output: u64, ready: f64) -> Result<()> {
        let m = &self.cfg.model;
        let mode = self.cfg.training_mode;
        let footprint = m.baseline_activation_footprint(mode, prompt, output);
        let peak = self.static_bytes + footprint;
        if peak > self.cfg.gpu.capacity_bytes {
            self.oom_flag = true;
            self.counters.jobs_oom += 1;
            self.log("training_oom", json!({ "query_id": qid, "bytes": peak }));
            return Ok(());
        }
        if let Some(budget) = self.cfg.baseline_budget {
            if self.training_busy >= budget {
                return Ok(());
            }
        }
        let iteration = m.baseline_iteration(mode, prompt, output)?;
        let start = ready.max(self.baseline_free_at);
        self.baseline_free_at = start + iteration;
        self.training_busy += iteration;
        self.trained_tokens += m.trained_tokens(mode, prompt, output);
        self.counters.jobs_completed += 1;
        self.peak_activation = self.peak_activation.max(footprint);
        self.baseline_peak = Some(self.baseline_peak.unwrap_or(self.static_bytes).max(peak));
        self.log(
            "baseline_iteration",
            json!({ "query_id": qid, "start": start, "end": start + iteration }),
        );
        Ok(())
    }

    // ---- colocated: recording and cache policy ----

    /// Decides whether a single-query batch records into the cache slot.
    fn try_admit(&mut self, q: &QueryRecord) -> Result<bool> {
        let m = &self.cfg.model;
        let mode = self.cfg.training_mode;
        let c = m.activation_tokens(mode, q.prompt_tokens, q.output_tokens);
        let footprint = m.colocated_activation_footprint(mode, q.prompt_tokens, q.output_tokens);
        let kv = m.cached_kv_bytes(mode, c);
        if self.static_bytes as u128 + footprint as u128 + kv as u128 > self.cfg.gpu.capacity_bytes as u128 {
            self.counters.jobs_oom += 1;
            self.log("training_oom", json!({ "query_id": q.query_id, "bytes": footprint + kv }));
            return Ok(false);
        }
        let id = self.next_job_id;
        self.next_job_id += 1;
        self.job = Some(Job {
            id,
            query_id: q.query_id,
            prompt: q.prompt_tokens,
            output: q.output_tokens,
            store: ActivationStore::new(self.l, c, mode, self.now),
            stage: Stage::Recording,
            kv_held: 0,
            kv_ready: false,
            kv_rebuild_layer: 0,
            running: None,
            load: None,
            wait_since: None,
        });
        self.counters.recordings += 1;
        Ok(true)
    }

    fn start_recording(&mut self, start: f64, prefill: f64) -> Result<()> {
        let (c, ctx) = {
            let j = self.job.as_ref().expect("recording without job");
            (j.store.cached_tokens, j.prompt + j.output)
        };
        let decision = self.offload_lookup(c, ctx, 1);
        let streamed = decision.layers(self.l);
        let per_layer = self.cfg.model.layer_activation_bytes(c);
        let mode = self.cfg.training_mode;
        let kv = if decision == OffloadDecision::AllToHost {
            0
        } else {
            self.cfg.model.cached_kv_bytes(mode, c)
        };
        if kv > 0 {
            self.alloc(kv, Purpose::Kv, "record_kv")?;
        }
        let mut copies = Vec::new();
        {
            let j = self.job.as_mut().expect("job");
            j.store.created_at = start;
            j.kv_held = kv;
            j.kv_ready = kv > 0 || mode == TrainingMode::Cpt;
            for layer in 0..self.l {
                let at = start + prefill * (layer + 1) as f64 / self.l as f64;
                let stream = if layer < streamed {
                    StreamMode::StreamToHost
                } else {
                    StreamMode::Retain
                };
                let done = j
                    .store
                    .record_activation(&mut self.ledger, &mut self.d2h, &self.cfg.gpu, layer, per_layer, at, stream)
                    .map_err(|e| Error::InvariantBreach {
                        time: start,
                        event: "record_activation".into(),
                        detail: e.to_string(),
                    })?;
                if stream == StreamMode::Retain {
                    copies.push((j.id, layer, done));
                }
            }
        }
        self.note_peaks();
        for (job, layer, done) in copies {
            self.schedule(done, Ev::CopyDone { job, layer, version: 0 });
        }
        if streamed > 0 {
            self.counters.offload_events += 1;
            self.counters.layers_freed += streamed as u64;
        }
        let id = self.job.as_ref().expect("job").id;
        self.log("record", json!({ "job": id, "cached_tokens": c, "streamed_layers": streamed, "kv_bytes": kv }));
        self.schedule(start + self.cfg.cache_timeout, Ev::CacheTimeout { job: id });
        Ok(())
    }

    fn finish_recording(&mut self) {
        let l = self.l;
        if let Some(j) = self.job.as_mut().filter(|j| j.stage == Stage::Recording) {
            j.stage = match j.store.training_mode {
                TrainingMode::Cpt => Stage::Backward { layer: l - 1 },
                TrainingMode::Cpa => Stage::WaitingLabel,
            };
        }
    }

    fn clear_job(&mut self, event: &str) -> Result<()> {
        self.abort_load()?;
        let mut j = self.job.take().expect("clear without job");
        for layer in 0..self.l {
            if j.store.entries[layer as usize].residency != Residency::Dropped {
                j.store
                    .drop_layer(&mut self.ledger, layer)
                    .map_err(|e| self.breach(event, e.to_string()))?;
            }
        }
        if j.kv_held > 0 {
            self.release(j.kv_held, Purpose::Kv, event)?;
        }
        Ok(())
    }

    // ---- colocated: offloader ----

    fn offload_lookup(&mut self, cached: u64, incoming: u64, batch: u64) -> OffloadDecision {
        match self.cfg.offloading_map.lookup(cached, incoming, batch) {
            Ok(d) => d,
            Err(e) => {
                self.counters.out_of_range_lookups += 1;
                ::log::warn!("offloading lookup treated as all-to-host: {e}");
                OffloadDecision::AllToHost
            }
        }
    }

    /// Makes room for a serving batch. Returns when its prefill may start,
    /// later than now if host copies must finish first.
    fn apply_offload(&mut self, incoming: u64, batch: u64) -> Result<f64> {
        let c = self.job.as_ref().expect("offload without job").store.cached_tokens;
        let decision = self.offload_lookup(c, incoming, batch);
        if decision == OffloadDecision::NoAction {
            return Ok(self.now);
        }
        let target = self.l - decision.layers(self.l);
        let (resident, host_only) = {
            let s = &self.job.as_ref().expect("job").store;
            (s.device_layers(), s.host_only_layers())
        };
        let to_free = resident.saturating_sub(target);
        let hedge = match decision {
            OffloadDecision::FreeLayers(_) if to_free > 0 => {
                match self.cfg.hedging_map.try_lookup(c, host_only + to_free) {
                    Ok(h) => h,
                    Err(e) => {
                        self.counters.out_of_range_lookups += 1;
                        ::log::warn!("hedging lookup fell back to recompute: {e}");
                        HedgeDecision::Recompute
                    }
                }
            }
            _ => HedgeDecision::LoadBack,
        };

        let mut start = self.now;
        if hedge == HedgeDecision::Recompute {
            self.drop_for_recompute()?;
        } else if to_free > 0 {
            let stall = self.job.as_ref().expect("job").store.copy_stall_until(to_free, self.now);
            if let Some(t) = stall {
                self.counters.copy_stall_seconds += t - self.now;
                start = t;
            }
            let j = self.job.as_mut().expect("job");
            j.store.complete_copies(start);
            j.store
                .free_layers_forward_order(&mut self.ledger, to_free)
                .map_err(|e| Error::InvariantBreach {
                    time: self.now,
                    event: "offload".into(),
                    detail: e.to_string(),
                })?;
            self.counters.layers_freed += to_free as u64;
            self.counters.offload_events += 1;
        }
        if decision == OffloadDecision::AllToHost {
            let j = self.job.as_mut().expect("job");
            let kv = j.kv_held;
            j.kv_held = 0;
            j.kv_ready = j.store.training_mode == TrainingMode::Cpt;
            j.kv_rebuild_layer = 0;
            if kv > 0 {
                self.release(kv, Purpose::Kv, "offload")?;
            }
        }
        self.log(
            "offload",
            json!({
                "decision": format!("{decision:?}"),
                "hedge": format!("{hedge:?}"),
                "freed": to_free,
                "prefill_start": start,
            }),
        );
        Ok(start)
    }

    /// Discards every cached layer from device and host; training will
    /// rebuild them with forward passes.
    fn drop_for_recompute(&mut self) -> Result<()> {
        let l = self.l;
        let j = self.job.as_mut().expect("job");
        let host_only = j.store.host_only_layers();
        for layer in 0..l {
            if j.store.entries[layer as usize].residency != Residency::Dropped {
                j.store.drop_layer(&mut self.ledger, layer).map_err(|e| Error::InvariantBreach {
                    time: self.now,
                    event: "recompute_drop".into(),
                    detail: e.to_string(),
                })?;
            }
        }
        j.stage = match j.stage {
            Stage::Forward { .. } => Stage::Forward { pass: 0, layer: 0 },
            Stage::Backward { layer } => Stage::Recompute { layer: 0, until: layer },
            Stage::Recompute { until, .. } => Stage::Recompute { layer: 0, until },
            other => other,
        };
        self.counters.recomputes += 1;
        self.counters.layers_dropped_by_recompute += host_only as u64;
        Ok(())
    }

    // ---- colocated: training ----

    /// Preemption: serving is about to run, so training pauses and any
    /// in-flight load is abandoned.
    fn preempt_training(&mut self) -> Result<()> {
        if self.job.is_none() {
            return Ok(());
        }
        if let Some(since) = self.job.as_mut().and_then(|j| j.wait_since.take()) {
            self.training_busy += self.now - since;
        }
        self.abort_load()?;
        if self.training_active {
            self.training_active = false;
            self.counters.preemptions += 1;
            self.log("preempt", json!({}));
        }
        Ok(())
    }

    fn abort_load(&mut self) -> Result<()> {
        let Some(load) = self.job.as_mut().and_then(|j| j.load.take()) else {
            return Ok(());
        };
        let bytes = self.job.as_ref().expect("job").store.entry(load.layer).bytes;
        self.release(bytes, Purpose::Load, "abort_load")?;
        self.h2d.cancel_tail(self.now, load.end);
        self.counters.loads_aborted += 1;
        Ok(())
    }

    fn advance_training(&mut self) -> Result<()> {
        let Some(j) = self.job.as_ref() else {
            return Ok(());
        };
        if !j.runnable() {
            return Ok(());
        }
        if !self.training_active {
            self.training_active = true;
            self.log("training_resume", json!({ "job": j.id }));
        }
        self.start_load_if_idle()?;
        let next = self.next_step()?;
        let j = self.job.as_mut().expect("job");
        match next {
            Some(step) => {
                if let Some(since) = j.wait_since.take() {
                    self.training_busy += self.now - since;
                }
                self.begin_step(step)?;
            }
            None => {
                if j.wait_since.is_none() {
                    j.wait_since = Some(self.now);
                }
            }
        }
        Ok(())
    }

    /// The next layer step, or `None` while waiting on a load.
    fn next_step(&self) -> Result<Option<(StepKind, u32)>> {
        let j = self.job.as_ref().expect("job");
        let needs_kv = matches!(j.stage, Stage::Forward { .. } | Stage::Recompute { .. });
        if needs_kv && !j.kv_ready {
            return Ok(Some((StepKind::KvRebuild, j.kv_rebuild_layer)));
        }
        Ok(match j.stage {
            Stage::Forward { layer, .. } => Some((StepKind::Forward, layer)),
            Stage::Recompute { layer, .. } => Some((StepKind::Recompute, layer)),
            Stage::Backward { layer } => {
                if j.store.entry(layer).residency.on_device() {
                    Some((StepKind::Backward, layer))
                } else if j.store.entry(layer).residency == Residency::HostOnly {
                    None
                } else {
                    return Err(self.breach("backward", format!("layer {layer} missing before backward")));
                }
            }
            Stage::Recording | Stage::WaitingLabel => None,
        })
    }

    fn step_duration(&self, kind: StepKind) -> Result<f64> {
        let m = &self.cfg.model;
        let j = self.job.as_ref().expect("job");
        let l = self.l as f64;
        Ok(match kind {
            StepKind::KvRebuild => m.prefill_latency(j.prompt, 1, false)? / l,
            StepKind::Forward => m.extend_latency(j.prompt, j.output)? / l,
            StepKind::Recompute => m.recompute_time(j.store.training_mode, j.store.cached_tokens, j.output)? / l,
            StepKind::Backward => m.backward_layer_latency(j.store.cached_tokens)?,
        })
    }

    fn begin_step(&mut self, (kind, layer): (StepKind, u32)) -> Result<()> {
        let duration = self.step_duration(kind)?;
        let end = self.now + duration;
        let recreate = match kind {
            StepKind::KvRebuild if layer == 0 => {
                let j = self.job.as_ref().expect("job");
                let kv = self.cfg.model.cached_kv_bytes(j.store.training_mode, j.store.cached_tokens);
                if j.kv_held == 0 && kv > 0 {
                    self.alloc(kv, Purpose::Kv, "kv_rebuild")?;
                    self.job.as_mut().expect("job").kv_held = kv;
                    self.counters.kv_rebuilds += 1;
                }
                false
            }
            StepKind::Forward => {
                let j = self.job.as_ref().expect("job");
                matches!(j.stage, Stage::Forward { pass: 0, .. })
                    && j.store.entry(layer).residency == Residency::Dropped
            }
            StepKind::Recompute => true,
            _ => false,
        };
        if recreate {
            let bytes = self.job.as_ref().expect("job").store.entry(layer).bytes;
            let (_, copy_done) = self.d2h.book(end, self.cfg.gpu.transfer_time(bytes, Direction::DeviceToHost));
            let now = self.now;
            let j = self.job.as_mut().expect("job");
            let version = j
                .store
                .recreate_layer(&mut self.ledger, layer, now, copy_done)
                .map_err(|e| Error::InvariantBreach {
                    time: now,
                    event: "recreate_layer".into(),
                    detail: e.to_string(),
                })?;
            let id = j.id;
            self.note_peaks();
            self.schedule(copy_done, Ev::CopyDone { job: id, layer, version });
        }
        let j = self.job.as_mut().expect("job");
        j.running = Some(RunningStep {
            kind,
            layer,
            start: self.now,
        });
        self.schedule(end, Ev::StepDone);
        Ok(())
    }

    fn on_step_done(&mut self, kind: StepKind, layer: u32) -> Result<()> {
        let l = self.l;
        let j = self.job.as_mut().expect("job");
        match kind {
            StepKind::KvRebuild => {
                if layer + 1 == l {
                    j.kv_ready = true;
                    j.kv_rebuild_layer = 0;
                } else {
                    j.kv_rebuild_layer = layer + 1;
                }
            }
            StepKind::Forward => {
                let Stage::Forward { pass, .. } = j.stage else {
                    return Err(self.breach("forward_layer_done", "stage mismatch"));
                };
                j.stage = match (pass, layer + 1 == l) {
                    (_, false) => Stage::Forward { pass, layer: layer + 1 },
                    (0, true) => Stage::Forward { pass: 1, layer: 0 },
                    (_, true) => Stage::Backward { layer: l - 1 },
                };
            }
            StepKind::Recompute => {
                let Stage::Recompute { until, .. } = j.stage else {
                    return Err(self.breach("forward_layer_done", "stage mismatch"));
                };
                j.stage = if layer >= until {
                    Stage::Backward { layer: until }
                } else {
                    Stage::Recompute { layer: layer + 1, until }
                };
            }
            StepKind::Backward => {
                j.store.drop_layer(&mut self.ledger, layer).map_err(|e| Error::InvariantBreach {
                    time: self.now,
                    event: "backward_layer_done".into(),
                    detail: e.to_string(),
                })?;
                if layer == 0 {
                    let tokens = j.store.cached_tokens;
                    self.trained_tokens += tokens;
                    self.counters.jobs_completed += 1;
                    let id = j.id;
                    self.clear_job("job_done")?;
                    self.training_active = false;
                    self.log("job_done", json!({ "job": id, "trained_tokens": tokens }));
                } else {
                    j.stage = Stage::Backward { layer: layer - 1 };
                }
            }
        }
        Ok(())
    }

    /// Prefetch: load the highest host-only layer the backward pass will
    /// reach next, one load at a time.
    fn start_load_if_idle(&mut self) -> Result<()> {
        let l = self.l;
        let Some(j) = self.job.as_ref() else {
            return Ok(());
        };
        if j.load.is_some() {
            return Ok(());
        }
        let cursor = match j.stage {
            Stage::Backward { layer } => layer,
            Stage::Forward { .. } => l - 1,
            _ => return Ok(()),
        };
        let Some(layer) = j.store.next_prefetch(cursor) else {
            return Ok(());
        };
        let entry = j.store.entry(layer).clone();
        self.alloc(entry.bytes, Purpose::Load, "load_start")?;
        let earliest = entry.host_copy_done_at.map_or(self.now, |t| t.max(self.now));
        let (start, end) = self
            .h2d
            .book(earliest, self.cfg.gpu.transfer_time(entry.bytes, Direction::HostToDevice));
        let id = self.next_load_id;
        self.next_load_id += 1;
        self.job.as_mut().expect("job").load = Some(Load { id, layer, end });
        self.log("load_start", json!({ "layer": layer, "start": start, "end": end }));
        self.schedule(end, Ev::LoadDone { load: id, layer });
        Ok(())
    }

    fn finish(self) -> RunOutput {
        let memory = MemorySummary {
            peak_device_bytes: self.peak_in_use,
            peak_allocated_bytes: self.ledger.peak_allocated(),
            peak_activation_bytes: self.peak_activation,
            peak_cached_kv_bytes: self.peak_kv,
            training_device_peak_bytes: self.baseline_peak,
        };
        let makespan = self.last_activity;
        let raw = RunData {
            run: RunInfo {
                kind: self.cfg.kind(),
                training_mode: self.cfg.training_mode,
                trace_id: self.trace.identity(),
                trace_seed: self.trace.seed,
                queries: self.trace.len() as u64,
            },
            tpt_samples: self.tpt,
            trained_tokens: self.trained_tokens,
            training_busy_time: self.training_busy,
            serving_busy_time: self.serving_busy,
            makespan,
            oom_flag: self.oom_flag,
            memory,
            counters: self.counters,
        };
        RunOutput {
            report: finalize(raw),
            events: self.log,
        }
    }
}

#[cfg(test)]
mod tests;
