//! Run reports: TPT distribution, training throughput, peak memory and event
//! counters, with CSV and JSON-lines export that round-trips exactly.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cost::TrainingMode;
use crate::error::{Error, Result};

/// Which system a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Training co-located on the serving device with activation reuse.
    Colocated,
    /// Training on a separate device that recomputes activations.
    SeparateCluster,
    /// Serving with training disabled.
    ServingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub kind: RunKind,
    pub training_mode: TrainingMode,
    pub trace_id: String,
    pub trace_seed: u64,
    pub queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub trained_tokens: u64,
    /// Seconds of serving-idle time spent computing or waiting on loads.
    pub training_busy_time: f64,
    /// Tokens per second of training busy time; absent when nothing ran.
    pub training_throughput: Option<f64>,
    pub serving_busy_time: f64,
    pub serving_idle_time: f64,
    /// Time of the last serving or training activity.
    pub makespan: f64,
    /// A training sample did not fit on the training device.
    pub oom_flag: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    /// Highest live bytes on the serving device.
    pub peak_device_bytes: u64,
    /// Highest ledger allocation, counting reserved buffers.
    pub peak_allocated_bytes: u64,
    /// Highest live training-activation bytes, on whichever device trains.
    pub peak_activation_bytes: u64,
    pub peak_cached_kv_bytes: u64,
    /// Peak of the separate training device, when there is one.
    pub training_device_peak_bytes: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub queries_served: u64,
    pub batches: u64,
    pub recordings: u64,
    pub preemptions: u64,
    pub offload_events: u64,
    pub layers_freed: u64,
    pub loads: u64,
    pub loads_aborted: u64,
    pub recomputes: u64,
    pub layers_dropped_by_recompute: u64,
    pub kv_rebuilds: u64,
    pub copy_stall_seconds: f64,
    pub labels_dropped: u64,
    pub jobs_completed: u64,
    pub jobs_timed_out: u64,
    pub jobs_oom: u64,
    pub out_of_range_lookups: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: RunInfo,
    pub latency: LatencySummary,
    pub training: TrainingSummary,
    pub memory: MemorySummary,
    pub counters: Counters,
    /// Seconds per generated token, in generation order.
    pub tpt_samples: Vec<f64>,
}

/// Raw measurements collected by a run, before summarizing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub run: RunInfo,
    pub tpt_samples: Vec<f64>,
    pub trained_tokens: u64,
    pub training_busy_time: f64,
    pub serving_busy_time: f64,
    pub makespan: f64,
    pub oom_flag: bool,
    pub memory: MemorySummary,
    pub counters: Counters,
}

/// Nearest-rank percentile of sorted samples; `None` when empty.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn summarize_latency(samples: &[f64]) -> LatencySummary {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    };
    LatencySummary {
        samples: samples.len() as u64,
        p50: nearest_rank(&sorted, 50.0),
        p90: nearest_rank(&sorted, 90.0),
        p99: nearest_rank(&sorted, 99.0),
        mean,
    }
}

pub fn finalize(raw: RunData) -> MetricsReport {
    let throughput = if raw.training_busy_time > 0.0 {
        Some(raw.trained_tokens as f64 / raw.training_busy_time)
    } else {
        None
    };
    MetricsReport {
        latency: summarize_latency(&raw.tpt_samples),
        training: TrainingSummary {
            trained_tokens: raw.trained_tokens,
            training_busy_time: raw.training_busy_time,
            training_throughput: throughput,
            serving_busy_time: raw.serving_busy_time,
            serving_idle_time: (raw.makespan - raw.serving_busy_time).max(0.0),
            makespan: raw.makespan,
            oom_flag: raw.oom_flag,
        },
        run: raw.run,
        memory: raw.memory,
        counters: raw.counters,
        tpt_samples: raw.tpt_samples,
    }
}

/// Sorted `(tpt, cumulative fraction)` pairs.
pub fn tpt_cdf(report: &MetricsReport) -> Vec<(f64, f64)> {
    let mut sorted = report.tpt_samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect()
}

/// Ratios of report `a` over report `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub paired: bool,
    pub throughput_ratio: Option<f64>,
    pub peak_device_ratio: Option<f64>,
    pub peak_activation_ratio: Option<f64>,
    pub mean_tpt_ratio: Option<f64>,
    pub oom_a: bool,
    pub oom_b: bool,
    pub oom_asymmetry: bool,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        (a == 0.0).then_some(1.0)
    } else {
        Some(a / b)
    }
}

fn opt_ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => ratio(a, b),
        _ => None,
    }
}

/// Compares two runs over the same trace. Different traces are refused
/// unless `unpaired` is set.
pub fn compare(a: &MetricsReport, b: &MetricsReport, unpaired: bool) -> Result<ComparisonSummary> {
    let paired = a.run.trace_id == b.run.trace_id;
    if !paired && !unpaired {
        return Err(Error::TraceMismatch(a.run.trace_id.clone(), b.run.trace_id.clone()));
    }
    Ok(ComparisonSummary {
        paired,
        throughput_ratio: opt_ratio(a.training.training_throughput, b.training.training_throughput),
        peak_device_ratio: ratio(a.memory.peak_device_bytes as f64, b.memory.peak_device_bytes as f64),
        peak_activation_ratio: ratio(
            a.memory.peak_activation_bytes as f64,
            b.memory.peak_activation_bytes as f64,
        ),
        mean_tpt_ratio: opt_ratio(a.latency.mean, b.latency.mean),
        oom_a: a.training.oom_flag,
        oom_b: b.training.oom_flag,
        oom_asymmetry: a.training.oom_flag != b.training.oom_flag,
    })
}

/// Column header of the CSV export. The `value` column holds a JSON scalar.
pub const CSV_HEADER: [&str; 4] = ["group", "key", "index", "value"];

const GROUPS: [&str; 5] = ["run", "latency", "training", "memory", "counters"];

impl MetricsReport {
    fn groups(&self) -> [(&'static str, Value); 5] {
        let to = |x: serde_json::Result<Value>| x.expect("report fields serialize");
        [
            ("run", to(serde_json::to_value(&self.run))),
            ("latency", to(serde_json::to_value(&self.latency))),
            ("training", to(serde_json::to_value(&self.training))),
            ("memory", to(serde_json::to_value(&self.memory))),
            ("counters", to(serde_json::to_value(&self.counters))),
        ]
    }

    fn from_groups(mut groups: Map<String, Value>, samples: Vec<f64>) -> std::result::Result<Self, String> {
        let mut take = |name: &str| groups.remove(name).ok_or_else(|| format!("missing group `{name}`"));
        let parse_err = |e: serde_json::Error| e.to_string();
        Ok(MetricsReport {
            run: serde_json::from_value(take("run")?).map_err(parse_err)?,
            latency: serde_json::from_value(take("latency")?).map_err(parse_err)?,
            training: serde_json::from_value(take("training")?).map_err(parse_err)?,
            memory: serde_json::from_value(take("memory")?).map_err(parse_err)?,
            counters: serde_json::from_value(take("counters")?).map_err(parse_err)?,
            tpt_samples: samples,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for (group, value) in self.groups() {
            if let Value::Object(fields) = value {
                for (key, v) in fields {
                    w.write_record([group, key.as_str(), "", &v.to_string()])
                        .expect("in-memory write");
                }
            }
        }
        for (i, s) in self.tpt_samples.iter().enumerate() {
            w.write_record(["tpt_samples", "tpt", &i.to_string(), &Value::from(*s).to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |line: usize, reason: String| Error::Parse {
            path: "<report csv>".into(),
            line,
            reason,
        };
        let header = r.headers().map_err(|e| bad(1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(bad(1, "unexpected header".into()));
        }
        let mut groups = Map::new();
        let mut samples = Vec::new();
        for (idx, row) in r.records().enumerate() {
            let line = idx + 2;
            let row = row.map_err(|e| bad(line, e.to_string()))?;
            if row.len() != 4 {
                return Err(bad(line, "expected 4 columns".into()));
            }
            let value: Value = serde_json::from_str(&row[3]).map_err(|e| bad(line, e.to_string()))?;
            if &row[0] == "tpt_samples" {
                let i: usize = row[2].parse().map_err(|_| bad(line, "bad sample index".into()))?;
                if i != samples.len() {
                    return Err(bad(line, "samples out of order".into()));
                }
                samples.push(value.as_f64().ok_or_else(|| bad(line, "sample is not a number".into()))?);
            } else if GROUPS.contains(&&row[0]) {
                let entry = groups
                    .entry(row[0].to_string())
                    .or_insert_with(|| Value::Object(Map::new()));
                entry
                    .as_object_mut()
                    .expect("object")
                    .insert(row[1].to_string(), value);
            } else {
                return Err(bad(line, format!("unknown group `{}`", &row[0])));
            }
        }
        Self::from_groups(groups, samples).map_err(|e| Error::invalid("report csv", e))
    }

    /// One JSON object per metric group.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (group, data) in self.groups() {
            out.push_str(&serde_json::json!({ "group": group, "data": data }).to_string());
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "group": "tpt_samples", "data": self.tpt_samples }).to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut groups = Map::new();
        let mut samples = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                path: "<report jsonl>".into(),
                line: idx + 1,
                reason,
            };
            let mut v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let group = v
                .get("group")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing `group`".into()))?
                .to_string();
            let data = v.get_mut("data").map(Value::take).ok_or_else(|| bad("missing `data`".into()))?;
            if group == "tpt_samples" {
                samples = Some(serde_json::from_value(data).map_err(|e| bad(e.to_string()))?);
            } else {
                groups.insert(group, data);
            }
        }
        Self::from_groups(groups, samples.unwrap_or_default()).map_err(|e| Error::invalid("report jsonl", e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_jsonl())
    }

    /// Loads either export format, chosen by extension (`.csv` or anything
    /// else for JSON-lines).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::from_csv(&text)
        } else {
            Self::from_jsonl(&text)
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_report() -> MetricsReport {
        finalize(RunData {
            run: RunInfo {
                kind: RunKind::Colocated,
                training_mode: TrainingMode::Cpa,
                trace_id: "0123456789".into(),
                trace_seed: 9,
                queries: 3,
            },
            tpt_samples: vec![0.022, 0.1 + 0.2, 1e-17, 0.0297],
            trained_tokens: 12560,
            training_busy_time: 12.56,
            serving_busy_time: 3.0,
            makespan: 20.0,
            oom_flag: false,
            memory: MemorySummary {
                peak_device_bytes: 70_000_000_000,
                peak_allocated_bytes: 71_000_000_000,
                peak_activation_bytes: 40_000_000_000,
                peak_cached_kv_bytes: 1,
                training_device_peak_bytes: None,
            },
            counters: Counters {
                preemptions: 4,
                copy_stall_seconds: 0.125,
                ..Counters::default()
            },
        })
    }

    #[test]
    fn throughput_and_percentiles() {
        let r = sample_report();
        let t = r.training.training_throughput.unwrap();
        assert!((t - 1000.0).abs() < 1e-9);
        assert!((t * r.training.training_busy_time - 12560.0).abs() < 1e-6);

        let ms: Vec<f64> = (1..=100).map(|i| i as f64 / 1000.0).collect();
        let s = summarize_latency(&ms);
        assert_eq!(s.p50, Some(0.050));
        assert_eq!(s.p90, Some(0.090));
        assert_eq!(s.p99, Some(0.099));
        assert_eq!(summarize_latency(&[]).p50, None);
    }

    #[test]
    fn zero_busy_time_has_no_throughput() {
        let mut raw_report = sample_report();
        raw_report.training.training_busy_time = 0.0;
        let r = finalize(RunData {
            run: raw_report.run.clone(),
            tpt_samples: vec![],
            trained_tokens: 0,
            training_busy_time: 0.0,
            serving_busy_time: 0.0,
            makespan: 0.0,
            oom_flag: false,
            memory: raw_report.memory.clone(),
            counters: Counters::default(),
        });
        assert_eq!(r.training.training_throughput, None);
    }

    #[test]
    fn csv_and_jsonl_roundtrip() {
        let r = sample_report();
        assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
        assert_eq!(MetricsReport::from_jsonl(&r.to_jsonl()).unwrap(), r);
        assert_eq!(r.to_jsonl().lines().count(), 6);
        assert!(r.to_csv().starts_with("group,key,index,value\n"));
    }

    #[test]
    fn cdf_is_sorted_and_ends_at_one() {
        let cdf = tpt_cdf(&sample_report());
        assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
        assert_eq!(cdf.last().unwrap().1, 1.0);
    }

    #[test]
    fn compare_identical_and_mismatched() {
        let a = sample_report();
        let c = compare(&a, &a, false).unwrap();
        assert_eq!(c.throughput_ratio, Some(1.0));
        assert_eq!(c.peak_device_ratio, Some(1.0));
        assert_eq!(c.mean_tpt_ratio, Some(1.0));
        assert!(!c.oom_asymmetry);

        let mut b = a.clone();
        b.run.trace_id = "other".into();
        b.training.oom_flag = true;
        assert!(matches!(compare(&a, &b, false), Err(Error::TraceMismatch(..))));
        let c = compare(&a, &b, true).unwrap();
        assert!(!c.paired && c.oom_asymmetry);
    }
}
