//! Subcommand implementations. Each one validates every input and
//! referenced file before it creates the output directory or runs anything.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use reusesim::experiments::{self, QpsPoint, ThroughputPoint, TptComparison};
use reusesim::metrics::tpt_cdf;
use reusesim::{
    generate_trace, load_trace, GpuProfile, GridSpec, HedgingMap, MetricsReport, ModelProfile, OffloadingMap,
    SimConfig, SimMode, Trace, TraceSpec, TrainingMode,
};
use serde::Serialize;

use crate::config::{self, ConfigFile, Figure, RunMode, SimSettings, SweepSettings};
use crate::output::{check_file, prepare_dir, write_rows, write_text};
use crate::{CompareArgs, PlotdataArgs, ProfileArgs, RunArgs, TraceArgs};

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

/// Absolute form of a command-line path, so it does not get resolved
/// against the config file's directory.
fn cli_path(p: &Path) -> Result<std::path::PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

/// A simulation config from resolved settings, with maps loaded from
/// `settings.maps` when given.
fn sim_config(
    model: &ModelProfile,
    gpu: &GpuProfile,
    settings: &SimSettings,
    training: TrainingMode,
    mode: RunMode,
) -> Result<SimConfig> {
    let sim_mode = match mode {
        RunMode::SeparateCluster => SimMode::SeparateCluster,
        RunMode::Colocated | RunMode::ServingOnly => SimMode::Colocated,
    };
    let mut cfg = SimConfig::new(model.clone(), gpu.clone(), sim_mode, training)?;
    cfg.training_enabled = mode != RunMode::ServingOnly;
    cfg.cache_timeout = settings.cache_timeout;
    cfg.max_batch = settings.max_batch;
    cfg.baseline_budget = settings.baseline_budget;
    if let Some(dir) = &settings.maps {
        let off = config::map_path(dir, "offloading", training);
        let hedge = config::map_path(dir, "hedging", training);
        cfg.offloading_map = Arc::new(OffloadingMap::load(&off)?);
        cfg.hedging_map = Arc::new(HedgingMap::load(&hedge)?);
        cfg.offloading_map
            .check_profiles(model, gpu)
            .with_context(|| format!("refusing stale map {}", off.display()))?;
        cfg.hedging_map
            .check_profiles(model, gpu)
            .with_context(|| format!("refusing stale map {}", hedge.display()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn provenance(cfg: &ConfigFile, model: &ModelProfile, gpu: &GpuProfile) -> String {
    format!(
        "# config\n{}\n# model profile\n{}\n# gpu profile\n{}",
        cfg.to_text(),
        model.to_text(),
        gpu.to_text()
    )
}

pub fn profile(args: &ProfileArgs, profile_dir: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    // A flag naming a file is relative to the working directory, not the config.
    for (key, value) in [("model.profile", &args.model), ("gpu.profile", &args.gpu)] {
        if let Some(v) = value {
            let as_file = Path::new(v);
            let v = if as_file.is_file() { cli_path(as_file)?.display().to_string() } else { v.clone() };
            cfg.set(key, v);
        }
    }
    let model = config::resolve_model(&cfg, profile_dir)?;
    let gpu = config::resolve_gpu(&cfg, profile_dir)?;
    let modes = args
        .modes
        .iter()
        .map(|m| m.parse::<TrainingMode>().map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    if modes.is_empty() {
        bail!("no training modes given");
    }
    if args.output_tokens == 0 {
        bail!("--output-tokens must be positive");
    }
    let grid = GridSpec {
        cached_step: args.cached_step,
        incoming_step: args.incoming_step,
        batch_step: args.batch_step,
        max_cached: args.max_cached,
        max_incoming: args.max_incoming,
        max_batch: args.max_batch,
    };
    grid.validate()?;

    let built = modes
        .par_iter()
        .map(|&mode| {
            let off = OffloadingMap::build(&model, &gpu, grid, mode)?;
            let hedge = HedgingMap::build(&model, &gpu, grid.cached_step, grid.max_cached, mode, args.output_tokens)?;
            Ok((mode, off, hedge))
        })
        .collect::<Result<Vec<_>>>()?;

    prepare_dir(&args.out.out, args.out.force)?;
    for (mode, off, hedge) in &built {
        off.write(&config::map_path(&args.out.out, "offloading", *mode))?;
        hedge.write(&config::map_path(&args.out.out, "hedging", *mode))?;
    }
    write_text(&args.out.out.join("model.profile"), &model.to_text())?;
    write_text(&args.out.out.join("gpu.profile"), &gpu.to_text())?;
    println!("wrote maps for {} mode(s) to {}", built.len(), args.out.out.display());
    Ok(())
}

pub fn run(args: &RunArgs, profile_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let model = config::resolve_model(&cfg, profile_dir)?;
    let gpu = config::resolve_gpu(&cfg, profile_dir)?;
    let mut settings = SimSettings::from_config(&cfg)?;
    if let Some(t) = &args.trace {
        settings.trace_file = Some(cli_path(t)?);
    }
    if let Some(m) = &args.maps {
        settings.maps = Some(cli_path(m)?);
    }
    if let Some(s) = args.seed {
        settings.seed = s;
    }
    if let Some(m) = &args.mode {
        settings.mode = m.parse()?;
    }
    settings.check_files()?;

    let mut sim = sim_config(&model, &gpu, &settings, settings.training, settings.mode)?;
    sim.record_events = args.emit_events;
    let trace = match &settings.trace_file {
        Some(p) => load_trace(p)?,
        None => generate_trace(&settings.trace, settings.seed)?,
    };

    prepare_dir(&args.out.out, args.out.force)?;
    info!("running {} queries", trace.len());
    let out = reusesim::run(&sim, &trace)?;
    let dir = &args.out.out;
    out.report.write_csv(&dir.join("report.csv"))?;
    out.report.write_jsonl(&dir.join("report.jsonl"))?;
    trace.write(&dir.join("trace.jsonl"))?;
    write_text(&dir.join("config.txt"), &provenance(&cfg, &model, &gpu))?;
    let events = dir.join("events.jsonl");
    if args.emit_events {
        write_text(&events, &out.events.to_jsonl())?;
    } else if events.exists() {
        // A forced rerun must not leave an older run's log beside the new report.
        std::fs::remove_file(&events).with_context(|| format!("removing {}", events.display()))?;
    }
    let r = &out.report;
    println!(
        "queries {} | mean tpt {} | trained tokens {} | throughput {} | preemptions {}",
        r.counters.queries_served,
        fmt_opt(r.latency.mean),
        r.training.trained_tokens,
        fmt_opt(r.training.training_throughput),
        r.counters.preemptions
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

#[derive(Serialize)]
struct TokenLengthRow {
    training_mode: TrainingMode,
    prompt_tokens: u64,
    output_tokens: u64,
    colocated_throughput: Option<f64>,
    baseline_throughput: Option<f64>,
    ratio: Option<f64>,
    analytic_ratio: f64,
    colocated_oom: bool,
    baseline_oom: bool,
}

impl TokenLengthRow {
    fn new(mode: TrainingMode, p: ThroughputPoint) -> Self {
        TokenLengthRow {
            training_mode: mode,
            prompt_tokens: p.prompt_tokens,
            output_tokens: p.output_tokens,
            colocated_throughput: p.colocated,
            baseline_throughput: p.baseline,
            ratio: p.ratio,
            analytic_ratio: p.analytic_ratio,
            colocated_oom: p.colocated_oom,
            baseline_oom: p.baseline_oom,
        }
    }
}

#[derive(Serialize)]
struct QpsRow {
    training_mode: TrainingMode,
    min_tokens: u64,
    qps: f64,
    seed: u64,
    queries: u64,
    colocated_throughput: Option<f64>,
    baseline_throughput: Option<f64>,
    unbounded_baseline_throughput: Option<f64>,
    baseline_oom: bool,
    jobs_completed: u64,
    layers_freed: u64,
    freed_per_job: Option<f64>,
    loads: u64,
    recomputes: u64,
    preemptions: u64,
}

impl QpsRow {
    fn new(mode: TrainingMode, min_tokens: u64, p: QpsPoint) -> Self {
        let c = &p.colocated.counters;
        QpsRow {
            training_mode: mode,
            min_tokens,
            qps: p.qps,
            seed: p.seed,
            queries: p.colocated.run.queries,
            colocated_throughput: p.colocated.training.training_throughput,
            baseline_throughput: p.baseline.training.training_throughput,
            unbounded_baseline_throughput: p.unbounded_baseline_throughput,
            baseline_oom: p.baseline.training.oom_flag,
            jobs_completed: c.jobs_completed,
            layers_freed: c.layers_freed,
            freed_per_job: (c.jobs_completed > 0).then(|| c.layers_freed as f64 / c.jobs_completed as f64),
            loads: c.loads,
            recomputes: c.recomputes,
            preemptions: c.preemptions,
        }
    }
}

/// Seed average of one (mode, min tokens, qps) group.
#[derive(Serialize)]
struct QpsMeanRow {
    training_mode: TrainingMode,
    min_tokens: u64,
    qps: f64,
    seeds: usize,
    colocated_throughput: Option<f64>,
    unbounded_baseline_throughput: Option<f64>,
    freed_per_job: Option<f64>,
    recomputes: u64,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn qps_means(rows: &[QpsRow]) -> Vec<QpsMeanRow> {
    let mut out: Vec<QpsMeanRow> = Vec::new();
    for group in rows.chunk_by(|a, b| a.training_mode == b.training_mode && a.min_tokens == b.min_tokens && a.qps == b.qps) {
        let first = &group[0];
        out.push(QpsMeanRow {
            training_mode: first.training_mode,
            min_tokens: first.min_tokens,
            qps: first.qps,
            seeds: group.len(),
            colocated_throughput: mean(group.iter().map(|r| r.colocated_throughput)),
            unbounded_baseline_throughput: mean(group.iter().map(|r| r.unbounded_baseline_throughput)),
            freed_per_job: mean(group.iter().map(|r| r.freed_per_job)),
            recomputes: group.iter().map(|r| r.recomputes).sum(),
        });
    }
    out
}

#[derive(Serialize)]
struct TptRow {
    qps: f64,
    queries: u64,
    serving_only_mean: Option<f64>,
    colocated_mean: Option<f64>,
    mean_increase: Option<f64>,
    serving_only_p99: Option<f64>,
    colocated_p99: Option<f64>,
    p99_shift: Option<f64>,
    preemption_bound: f64,
    preemptions: u64,
    jobs_completed: u64,
}

impl TptRow {
    fn new(qps: f64, t: &TptComparison) -> Self {
        TptRow {
            qps,
            queries: t.colocated.run.queries,
            serving_only_mean: t.serving_only.latency.mean,
            colocated_mean: t.colocated.latency.mean,
            mean_increase: t.mean_increase,
            serving_only_p99: t.serving_only.latency.p99,
            colocated_p99: t.colocated.latency.p99,
            p99_shift: t.p99_shift,
            preemption_bound: t.preemption_bound,
            preemptions: t.colocated.counters.preemptions,
            jobs_completed: t.colocated.counters.jobs_completed,
        }
    }
}

#[derive(Serialize)]
struct CdfRow<'a> {
    system: &'a str,
    tpt: f64,
    cdf: f64,
}

#[derive(Serialize)]
struct MemoryRow {
    training_mode: TrainingMode,
    prompt_tokens: u64,
    output_tokens: u64,
    colocated_bytes: u64,
    baseline_bytes: u64,
    saving: f64,
    closed_form: f64,
}

#[derive(Serialize)]
struct MaxTokensRow {
    training_mode: TrainingMode,
    output_tokens: u64,
    colocated: u64,
    baseline: u64,
    ratio: Option<f64>,
}

/// Everything one `compare` sweep produces, written after all points finish.
#[derive(Default)]
struct SweepResults {
    token_length: Vec<TokenLengthRow>,
    qps: Vec<QpsRow>,
    tpt: Vec<(f64, TptComparison)>,
    memory: Vec<MemoryRow>,
    max_tokens: Vec<MaxTokensRow>,
}

pub fn compare(args: &CompareArgs, profile_dir: Option<&Path>) -> Result<()> {
    if let Some(paths) = &args.reports {
        return compare_reports(&paths[0], &paths[1], args);
    }
    let Some(out) = &args.out else {
        bail!("--out is required when running sweeps");
    };
    let cfg = load_config(args.config.as_deref())?;
    let model = config::resolve_model(&cfg, profile_dir)?;
    let gpu = config::resolve_gpu(&cfg, profile_dir)?;
    let settings = SimSettings::from_config(&cfg)?;
    let sweep = SweepSettings::from_config(&cfg)?;

    let mut modes: Vec<TrainingMode> = Vec::new();
    for &fig in &sweep.figures {
        let wanted: &[TrainingMode] = match fig {
            Figure::TokenLength => &sweep.modes,
            Figure::Qps => &sweep.qps_modes,
            Figure::Tpt | Figure::Memory => std::slice::from_ref(&settings.training),
        };
        modes.extend(wanted);
    }
    if sweep.figures.contains(&Figure::Memory) {
        modes.extend(&sweep.modes);
    }
    modes.sort();
    modes.dedup();
    let configs = modes
        .iter()
        .map(|&m| Ok((m, sim_config(&model, &gpu, &settings, m, RunMode::Colocated)?)))
        .collect::<Result<Vec<_>>>()?;
    let cfg_for = |m: TrainingMode| &configs.iter().find(|(k, _)| *k == m).expect("config built for every mode").1;

    prepare_dir(out, args.force)?;
    let mut results = SweepResults::default();
    for &fig in &sweep.figures {
        info!("sweeping {fig:?}");
        match fig {
            Figure::TokenLength => {
                let jobs: Vec<(TrainingMode, u64)> = sweep
                    .modes
                    .iter()
                    .flat_map(|&m| sweep.lengths.iter().map(move |&l| (m, l)))
                    .collect();
                results.token_length = jobs
                    .par_iter()
                    .map(|&(m, len)| {
                        let p = experiments::throughput_point(cfg_for(m), len, settings.trace.output_tokens)?;
                        Ok(TokenLengthRow::new(m, p))
                    })
                    .collect::<Result<_>>()?;
            }
            Figure::Qps => {
                let mut jobs = Vec::new();
                for &m in &sweep.qps_modes {
                    for &mt in &sweep.min_tokens {
                        for &q in &sweep.qps {
                            for &s in &sweep.seeds {
                                jobs.push((m, mt, q, s));
                            }
                        }
                    }
                }
                results.qps = jobs
                    .par_iter()
                    .map(|&(m, mt, qps, seed)| {
                        let spec = TraceSpec {
                            qps,
                            duration: sweep.duration,
                            lengths: settings.trace.lengths.clone().with_min_tokens(Some(mt)),
                            ..settings.trace.clone()
                        };
                        Ok(QpsRow::new(m, mt, experiments::qps_point(cfg_for(m), &spec, seed)?))
                    })
                    .collect::<Result<_>>()?;
            }
            Figure::Tpt => {
                let cfg = cfg_for(settings.training);
                results.tpt = sweep
                    .tpt_qps
                    .par_iter()
                    .map(|&qps| {
                        let spec = TraceSpec {
                            qps,
                            duration: sweep.tpt_queries as f64 / qps,
                            ..settings.trace.clone()
                        };
                        let trace = generate_trace(&spec, settings.seed)?;
                        Ok((qps, experiments::tpt_comparison(cfg, &trace)?))
                    })
                    .collect::<Result<_>>()?;
            }
            Figure::Memory => {
                let cfg = cfg_for(settings.training);
                results.memory = sweep
                    .pairs
                    .par_iter()
                    .map(|&(p, r)| {
                        let m = experiments::memory_point(cfg, p, r)?;
                        Ok(MemoryRow {
                            training_mode: settings.training,
                            prompt_tokens: m.prompt_tokens,
                            output_tokens: m.output_tokens,
                            colocated_bytes: m.colocated_bytes,
                            baseline_bytes: m.baseline_bytes,
                            saving: m.saving,
                            closed_form: m.closed_form,
                        })
                    })
                    .collect::<Result<_>>()?;
                results.max_tokens = sweep
                    .modes
                    .par_iter()
                    .map(|&m| {
                        let output = settings.trace.output_tokens;
                        let t = experiments::max_tokens_comparison(cfg_for(m), output, sweep.max_tokens_upper)?;
                        Ok(MaxTokensRow {
                            training_mode: m,
                            output_tokens: output,
                            colocated: t.colocated,
                            baseline: t.baseline,
                            ratio: t.ratio,
                        })
                    })
                    .collect::<Result<_>>()?;
            }
        }
    }
    write_sweep(out, &sweep, &results)?;
    write_text(&out.join("config.txt"), &provenance(&cfg, &model, &gpu))?;
    println!("wrote {} dataset(s) to {}", sweep.figures.len(), out.display());
    Ok(())
}

fn write_sweep(out: &Path, sweep: &SweepSettings, r: &SweepResults) -> Result<()> {
    for fig in &sweep.figures {
        match fig {
            Figure::TokenLength => write_rows(&out.join("throughput_vs_token_length.csv"), &r.token_length)?,
            Figure::Qps => {
                write_rows(&out.join("throughput_vs_qps.csv"), &r.qps)?;
                write_rows(&out.join("throughput_vs_qps_mean.csv"), &qps_means(&r.qps))?;
            }
            Figure::Tpt => {
                let rows: Vec<TptRow> = r.tpt.iter().map(|(q, t)| TptRow::new(*q, t)).collect();
                write_rows(&out.join("mean_tpt_vs_qps.csv"), &rows)?;
                for (qps, t) in &r.tpt {
                    let mut cdf = Vec::new();
                    for (system, report) in [("serving_only", &t.serving_only), ("colocated", &t.colocated)] {
                        cdf.extend(tpt_cdf(report).into_iter().map(|(tpt, cdf)| CdfRow { system, tpt, cdf }));
                    }
                    write_rows(&out.join(format!("tpt_cdf_qps{qps}.csv")), &cdf)?;
                }
            }
            Figure::Memory => {
                write_rows(&out.join("memory_saving.csv"), &r.memory)?;
                write_rows(&out.join("max_tokens.csv"), &r.max_tokens)?;
            }
        }
    }
    Ok(())
}

fn compare_reports(a: &Path, b: &Path, args: &CompareArgs) -> Result<()> {
    let ra = MetricsReport::load(a)?;
    let rb = MetricsReport::load(b)?;
    let summary = reusesim::compare(&ra, &rb, args.unpaired)?;
    let text = serde_json::to_string_pretty(&summary)?;
    if let Some(out) = &args.out {
        prepare_dir(out, args.force)?;
        write_text(&out.join("comparison.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct ReportSummaryRow<'a> {
    report: &'a str,
    kind: String,
    training_mode: TrainingMode,
    trace_id: &'a str,
    queries: u64,
    mean_tpt: Option<f64>,
    p99_tpt: Option<f64>,
    training_throughput: Option<f64>,
    trained_tokens: u64,
    peak_device_bytes: u64,
    peak_activation_bytes: u64,
    oom: bool,
}

pub fn plotdata(args: &PlotdataArgs) -> Result<()> {
    // Reports are labelled by the path as given, which is unique per run dir.
    let loaded = args
        .reports
        .iter()
        .map(|p| Ok((p.display().to_string(), MetricsReport::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    prepare_dir(&args.out.out, args.out.force)?;
    let mut cdf = Vec::new();
    let mut summary = Vec::new();
    for (name, r) in &loaded {
        cdf.extend(tpt_cdf(r).into_iter().map(|(tpt, cdf)| CdfRow { system: name, tpt, cdf }));
        summary.push(ReportSummaryRow {
            report: name,
            kind: serde_json::to_value(r.run.kind)?.as_str().unwrap_or_default().to_string(),
            training_mode: r.run.training_mode,
            trace_id: &r.run.trace_id,
            queries: r.run.queries,
            mean_tpt: r.latency.mean,
            p99_tpt: r.latency.p99,
            training_throughput: r.training.training_throughput,
            trained_tokens: r.training.trained_tokens,
            peak_device_bytes: r.memory.peak_device_bytes,
            peak_activation_bytes: r.memory.peak_activation_bytes,
            oom: r.training.oom_flag,
        });
    }
    write_rows(&args.out.out.join("tpt_cdf.csv"), &cdf)?;
    write_rows(&args.out.out.join("summary.csv"), &summary)?;
    println!("wrote plot data for {} report(s) to {}", loaded.len(), args.out.out.display());
    Ok(())
}

pub fn trace(args: &TraceArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let settings = SimSettings::from_config(&cfg)?;
    if settings.trace_file.is_some() {
        bail!("sim.trace names an existing trace; remove it to generate one");
    }
    check_file(&args.out, args.force)?;
    let trace: Trace = generate_trace(&settings.trace, args.seed.unwrap_or(settings.seed))?;
    trace.write(&args.out)?;
    println!("wrote {} queries to {} (id {})", trace.len(), args.out.display(), trace.identity());
    Ok(())
}
