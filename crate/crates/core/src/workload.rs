//! Serving traces: Poisson arrivals with sampled prompt lengths and
//! label-arrival delays, plus JSON-lines trace and histogram files.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_OUTPUT_TOKENS: u64 = 128;
pub const DEFAULT_LABEL_DELAY: f64 = 0.01;

const SHAREGPT_LIKE: &str = include_str!("../data/sharegpt_like_lengths.jsonl");

/// One serving request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub arrival_time: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    /// Seconds after generation completes until feedback arrives.
    /// `None` means the label never arrives.
    pub label_delay: Option<f64>,
}

impl QueryRecord {
    fn validate(&self) -> Result<()> {
        let bad = |field: &str| {
            Err(Error::invalid(
                format!("query {}", self.query_id),
                format!("{field} out of range"),
            ))
        };
        if !(self.arrival_time.is_finite() && self.arrival_time >= 0.0) {
            return bad("arrival_time");
        }
        if self.prompt_tokens == 0 {
            return bad("prompt_tokens");
        }
        if self.output_tokens == 0 {
            return bad("output_tokens");
        }
        if let Some(d) = self.label_delay {
            if !(d.is_finite() && d >= 0.0) {
                return bad("label_delay");
            }
        }
        Ok(())
    }
}

/// An ordered list of requests. Records are sorted by arrival time, ties
/// broken by id, and ids are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<QueryRecord>,
    pub seed: u64,
    /// Generation rate; 0 for traces loaded from a file.
    pub qps: f64,
}

impl Trace {
    pub fn new(mut records: Vec<QueryRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.query_id) {
                return Err(Error::invalid("trace", format!("duplicate query_id {}", r.query_id)));
            }
        }
        records.sort_by(|a, b| {
            a.arrival_time
                .total_cmp(&b.arrival_time)
                .then(a.query_id.cmp(&b.query_id))
        });
        Ok(Trace {
            records,
            seed: 0,
            qps: 0.0,
        })
    }

    pub fn empty() -> Self {
        Trace {
            records: Vec::new(),
            seed: 0,
            qps: 0.0,
        }
    }

    /// One query at t=0, handy for uncontended measurements.
    pub fn single(prompt_tokens: u64, output_tokens: u64, label_delay: Option<f64>) -> Self {
        Trace {
            records: vec![QueryRecord {
                query_id: 0,
                arrival_time: 0.0,
                prompt_tokens,
                output_tokens,
                label_delay,
            }],
            seed: 0,
            qps: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Content hash of the records; paired runs compare it.
    pub fn identity(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn parse_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: QueryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        Trace::new(records)
    }
}

/// Reads and validates a JSON-lines trace, re-sorting if needed.
pub fn load_trace(path: &Path) -> Result<Trace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Trace::parse_jsonl(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub tokens: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LengthKind {
    Histogram(Vec<HistogramBin>),
    Uniform { min: u64, max: u64 },
    Fixed(u64),
}

/// Prompt-length distribution with an optional lower clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub kind: LengthKind,
    pub min_tokens: Option<u64>,
}

impl LengthDistribution {
    pub fn fixed(tokens: u64) -> Self {
        LengthDistribution {
            kind: LengthKind::Fixed(tokens),
            min_tokens: None,
        }
    }

    pub fn uniform(min: u64, max: u64) -> Self {
        LengthDistribution {
            kind: LengthKind::Uniform { min, max },
            min_tokens: None,
        }
    }

    pub fn histogram(bins: Vec<HistogramBin>) -> Self {
        LengthDistribution {
            kind: LengthKind::Histogram(bins),
            min_tokens: None,
        }
    }

    /// The shipped conversation-length histogram.
    pub fn sharegpt_like() -> Self {
        Self::parse_histogram(SHAREGPT_LIKE, "<shipped histogram>").expect("shipped histogram parses")
    }

    pub fn with_min_tokens(mut self, min_tokens: Option<u64>) -> Self {
        self.min_tokens = min_tokens;
        self
    }

    pub fn load_histogram(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_histogram(&text, &path.display().to_string())
    }

    pub fn parse_histogram(text: &str, origin: &str) -> Result<Self> {
        let mut bins = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bin: HistogramBin = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
            bins.push(bin);
        }
        let dist = Self::histogram(bins);
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            LengthKind::Fixed(v) => {
                if *v == 0 {
                    return Err(Error::invalid("length distribution", "fixed value must be >= 1"));
                }
            }
            LengthKind::Uniform { min, max } => {
                if *min == 0 {
                    return Err(Error::invalid("length distribution", "min must be >= 1"));
                }
                if min > max {
                    return Err(Error::invalid("length distribution", "min exceeds max"));
                }
            }
            LengthKind::Histogram(bins) => {
                if bins.is_empty() {
                    return Err(Error::invalid("length distribution", "histogram has no bins"));
                }
                let mut total = 0.0;
                for b in bins {
                    if b.tokens == 0 {
                        return Err(Error::invalid("length distribution", "bin tokens must be >= 1"));
                    }
                    if !(b.probability.is_finite() && b.probability >= 0.0) {
                        return Err(Error::invalid(
                            "length distribution",
                            format!("bin {} has invalid probability", b.tokens),
                        ));
                    }
                    total += b.probability;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "length distribution",
                        format!("histogram probabilities sum to {total}, expected 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Largest value the distribution can produce.
    pub fn max_value(&self) -> u64 {
        let raw = match &self.kind {
            LengthKind::Fixed(v) => *v,
            LengthKind::Uniform { max, .. } => *max,
            LengthKind::Histogram(bins) => bins.iter().map(|b| b.tokens).max().unwrap_or(0),
        };
        raw.max(self.min_tokens.unwrap_or(0))
    }
}

/// Draws one prompt length. Validation is the caller's job; see
/// [`LengthSampler`] for the checked, amortized form.
pub fn sample_length<R: Rng + ?Sized>(dist: &LengthDistribution, rng: &mut R) -> u64 {
    LengthSampler::new(dist).expect("valid distribution").sample(rng)
}

/// A validated distribution with its sampling tables prepared.
pub struct LengthSampler {
    kind: SamplerKind,
    min_tokens: u64,
}

enum SamplerKind {
    Fixed(u64),
    Uniform(u64, u64),
    Histogram(Vec<u64>, WeightedIndex<f64>),
}

impl LengthSampler {
    pub fn new(dist: &LengthDistribution) -> Result<Self> {
        dist.validate()?;
        let kind = match &dist.kind {
            LengthKind::Fixed(v) => SamplerKind::Fixed(*v),
            LengthKind::Uniform { min, max } => SamplerKind::Uniform(*min, *max),
            LengthKind::Histogram(bins) => {
                let weights = WeightedIndex::new(bins.iter().map(|b| b.probability))
                    .map_err(|e| Error::invalid("length distribution", e.to_string()))?;
                SamplerKind::Histogram(bins.iter().map(|b| b.tokens).collect(), weights)
            }
        };
        Ok(LengthSampler {
            kind,
            min_tokens: dist.min_tokens.unwrap_or(0),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let raw = match &self.kind {
            SamplerKind::Fixed(v) => *v,
            SamplerKind::Uniform(lo, hi) => rng.random_range(*lo..=*hi),
            SamplerKind::Histogram(tokens, idx) => tokens[idx.sample(rng)],
        };
        raw.max(self.min_tokens)
    }
}

/// How long after generation the user's label shows up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelDelay {
    Fixed(f64),
    Uniform { min: f64, max: f64 },
    Never,
}

impl Default for LabelDelay {
    fn default() -> Self {
        LabelDelay::Fixed(DEFAULT_LABEL_DELAY)
    }
}

impl LabelDelay {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LabelDelay::Fixed(d) if !(d.is_finite() && d >= 0.0) => {
                Err(Error::invalid("label delay", "fixed delay must be finite and >= 0"))
            }
            LabelDelay::Uniform { min, max } if !(min.is_finite() && max.is_finite() && 0.0 <= min && min <= max) => {
                Err(Error::invalid("label delay", "uniform bounds must satisfy 0 <= min <= max"))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        match *self {
            LabelDelay::Fixed(d) => Some(d),
            LabelDelay::Uniform { min, max } => {
                if min == max {
                    Some(min)
                } else {
                    Some(rng.random_range(min..max))
                }
            }
            LabelDelay::Never => None,
        }
    }
}

/// Parameters for a synthetic trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSpec {
    pub qps: f64,
    /// Arrivals stop at this many seconds.
    pub duration: f64,
    pub lengths: LengthDistribution,
    pub label_delay: LabelDelay,
    pub output_tokens: u64,
}

impl TraceSpec {
    pub fn new(qps: f64, duration: f64, lengths: LengthDistribution) -> Self {
        TraceSpec {
            qps,
            duration,
            lengths,
            label_delay: LabelDelay::default(),
            output_tokens: DEFAULT_OUTPUT_TOKENS,
        }
    }
}

/// Poisson arrivals at `spec.qps` over `[0, spec.duration)`. The same spec and
/// seed always produce the same trace.
pub fn generate_trace(spec: &TraceSpec, seed: u64) -> Result<Trace> {
    if !(spec.qps.is_finite() && spec.qps > 0.0) {
        return Err(Error::invalid("trace spec", "qps must be positive"));
    }
    if !(spec.duration.is_finite() && spec.duration > 0.0) {
        return Err(Error::invalid("trace spec", "duration must be positive"));
    }
    if spec.output_tokens == 0 {
        return Err(Error::invalid("trace spec", "output_tokens must be >= 1"));
    }
    spec.label_delay.validate()?;
    let sampler = LengthSampler::new(&spec.lengths)?;
    let gaps = Exp::new(spec.qps).map_err(|e| Error::invalid("trace spec", e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= spec.duration {
            break;
        }
        let prompt_tokens = sampler.sample(&mut rng);
        let label_delay = spec.label_delay.sample(&mut rng);
        records.push(QueryRecord {
            query_id: records.len() as u64,
            arrival_time: t,
            prompt_tokens,
            output_tokens: spec.output_tokens,
            label_delay,
        });
    }
    Ok(Trace {
        records,
        seed,
        qps: spec.qps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks_statistic(mut xs: Vec<f64>, rate: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let mut d: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let cdf = 1.0 - (-rate * x).exp();
            d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
        }
        d
    }

    fn gaps(trace: &Trace) -> Vec<f64> {
        let mut prev = 0.0;
        trace
            .records
            .iter()
            .map(|r| {
                let g = r.arrival_time - prev;
                prev = r.arrival_time;
                g
            })
            .collect()
    }

    #[test]
    fn poisson_count_concentrates() {
        let spec = TraceSpec::new(1.0, 10_000.0, LengthDistribution::fixed(1000));
        let trace = generate_trace(&spec, 7).unwrap();
        assert!((9700..=10300).contains(&trace.len()), "{}", trace.len());
    }

    #[test]
    fn mean_gap_at_1_7_qps() {
        let spec = TraceSpec::new(1.7, 10_000.0, LengthDistribution::fixed(1000));
        let trace = generate_trace(&spec, 11).unwrap();
        let g = gaps(&trace);
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 1.0 / 1.7).abs() <= 0.02 / 1.7, "{mean}");
    }

    #[test]
    fn gaps_pass_ks_at_one_percent() {
        for seed in [1, 2, 3] {
            let spec = TraceSpec::new(2.0, 4000.0, LengthDistribution::fixed(10));
            let trace = generate_trace(&spec, seed).unwrap();
            let g = gaps(&trace);
            assert!(g.len() >= 5000);
            let d = ks_statistic(g.clone(), 2.0);
            let critical = 1.628 / (g.len() as f64).sqrt();
            assert!(d < critical, "seed {seed}: D={d} critical={critical}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TraceSpec::new(1.7, 500.0, LengthDistribution::sharegpt_like());
        let a = generate_trace(&spec, 42).unwrap();
        let b = generate_trace(&spec, 42).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = generate_trace(&spec, 43).unwrap();
        assert_ne!(a.identity(), c.identity());
    }

    #[test]
    fn sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fixed = LengthDistribution::fixed(3000);
        assert!((0..100).all(|_| sample_length(&fixed, &mut rng) == 3000));

        let clamped = LengthDistribution::uniform(500, 7000).with_min_tokens(Some(4000));
        let s = LengthSampler::new(&clamped).unwrap();
        assert!((0..10_000).map(|_| s.sample(&mut rng)).all(|v| (4000..=7000).contains(&v)));

        let hist = LengthDistribution::histogram(vec![
            HistogramBin { tokens: 1000, probability: 0.5 },
            HistogramBin { tokens: 2000, probability: 0.5 },
        ]);
        let s = LengthSampler::new(&hist).unwrap();
        let n = 100_000;
        let ones = (0..n).filter(|_| s.sample(&mut rng) == 1000).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.01, "{freq}");
    }

    #[test]
    fn invalid_distributions_name_the_problem() {
        let bad = LengthDistribution::uniform(10, 5);
        assert!(bad.validate().unwrap_err().to_string().contains("min"));
        let bad = LengthDistribution::histogram(vec![HistogramBin { tokens: 10, probability: 0.7 }]);
        assert!(bad.validate().unwrap_err().to_string().contains("sum"));
        assert!(LengthDistribution::sharegpt_like().validate().is_ok());
    }

    #[test]
    fn trace_rejections() {
        let rec = |id, t, p| QueryRecord {
            query_id: id,
            arrival_time: t,
            prompt_tokens: p,
            output_tokens: 128,
            label_delay: None,
        };
        let dup = Trace::new(vec![rec(1, 0.0, 10), rec(1, 1.0, 10)]).unwrap_err();
        assert!(dup.to_string().contains("duplicate query_id 1"));
        let zero = Trace::new(vec![rec(3, 0.0, 0)]).unwrap_err();
        assert!(zero.to_string().contains("prompt_tokens"));
        let sorted = Trace::new(vec![rec(2, 5.0, 10), rec(1, 5.0, 10), rec(0, 6.0, 10)]).unwrap();
        let ids: Vec<u64> = sorted.records.iter().map(|r| r.query_id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let spec = TraceSpec::new(0.5, 100.0, LengthDistribution::sharegpt_like());
        let trace = generate_trace(&spec, 5).unwrap();
        let back = Trace::parse_jsonl(&trace.to_jsonl(), "t").unwrap();
        assert_eq!(back.records, trace.records);
        let err = Trace::parse_jsonl("{\"query_id\": 1}\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
