//! Event log and the serving/training exclusivity audit.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
}

/// Dispatched events in (time, seq) order. Compute events carry `start`,
/// `end` and `work` ("serving" or "training") in their payload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

/// A closed-open interval of device compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeInterval {
    pub start: f64,
    pub end: f64,
    pub seq: u64,
}

/// Two compute intervals that share device time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub serving: ComputeInterval,
    pub training: ComputeInterval,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: "<event log>".into(),
                line: idx + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(EventLog { records })
    }

    /// Compute intervals tagged with `work`, sorted by start.
    pub fn intervals(&self, work: &str) -> Vec<ComputeInterval> {
        let mut out: Vec<ComputeInterval> = self
            .records
            .iter()
            .filter(|r| r.payload.get("work").and_then(Value::as_str) == Some(work))
            .filter_map(|r| {
                Some(ComputeInterval {
                    start: r.payload.get("start")?.as_f64()?,
                    end: r.payload.get("end")?.as_f64()?,
                    seq: r.seq,
                })
            })
            .collect();
        out.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.seq.cmp(&b.seq)));
        out
    }

    /// Every pair of serving and training intervals that overlap with
    /// positive length. Touching endpoints do not count.
    pub fn audit_exclusivity(&self) -> Vec<Overlap> {
        let serving = self.intervals("serving");
        let training = self.intervals("training");
        let mut found = Vec::new();
        let mut j0 = 0;
        for s in &serving {
            while j0 < training.len() && training[j0].end <= s.start {
                j0 += 1;
            }
            let mut j = j0;
            while j < training.len() && training[j].start < s.end {
                let t = training[j];
                if t.end > s.start {
                    found.push(Overlap { serving: *s, training: t });
                }
                j += 1;
            }
        }
        found
    }

    pub fn count(&self, kind: &str) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn compute(seq: u64, work: &str, start: f64, end: f64) -> EventRecord {
        EventRecord {
            time: end,
            seq,
            kind: "x".into(),
            payload: json!({ "work": work, "start": start, "end": end }),
        }
    }

    #[test]
    fn touching_intervals_are_exclusive() {
        let log = EventLog {
            records: vec![
                compute(0, "serving", 0.0, 1.0),
                compute(1, "training", 1.0, 2.0),
                compute(2, "serving", 2.0, 3.0),
            ],
        };
        assert!(log.audit_exclusivity().is_empty());
    }

    #[test]
    fn overlap_is_found() {
        let log = EventLog {
            records: vec![compute(0, "training", 0.5, 1.5), compute(1, "serving", 1.0, 2.0)],
        };
        let found = log.audit_exclusivity();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].training.start, 0.5);
    }

    #[test]
    fn jsonl_roundtrip() {
        let log = EventLog {
            records: vec![compute(0, "serving", 0.1, 0.30000000000000004)],
        };
        assert_eq!(EventLog::parse_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
