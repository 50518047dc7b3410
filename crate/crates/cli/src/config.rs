//! Flat `section.key = value` experiment files.
//!
//! Sections are `model.`, `gpu.`, `sim.` and `sweep.`. Relative paths inside a
//! file resolve against the file's directory. See [`CONFIG_HELP`] for keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use reusesim::{GpuProfile, LabelDelay, LengthDistribution, ModelProfile, TraceSpec, TrainingMode};

pub const CONFIG_HELP: &str = "\
CONFIG FILE KEYS (flat `key = value`, `#` comments):
  model.profile         preset name, NAME from the profile dir, or a path   [llama-8b]
  model.<field>         override one model profile field, e.g. model.act_bytes_per_token_per_layer
  gpu.profile           preset name, NAME from the profile dir, or a path   [a100-80g]
  gpu.<field>           override one gpu profile field, e.g. gpu.capacity_bytes
  sim.mode              colocated | separate_cluster | serving_only         [colocated]
  sim.training          cpt | cpa                                            [cpa]
  sim.cache_timeout     seconds a cached sample waits for its label          [60]
  sim.max_batch         largest serving batch                                [50]
  sim.baseline_budget   separate-cluster training-time budget in seconds     [none]
  sim.maps              directory with offloading-<mode>.map and hedging-<mode>.map
  sim.trace             JSON-lines trace file (otherwise one is generated)
  sim.qps               arrival rate                                         [0.2]
  sim.duration          arrival window in seconds                            [600]
  sim.lengths           sharegpt | fixed:N | uniform:A:B | histogram file    [sharegpt]
  sim.min_tokens        clamp prompt lengths from below                      [none]
  sim.output_tokens     tokens generated per query                           [128]
  sim.label_delay       seconds | uniform:A:B | never                        [0.01]
  sim.seed              trace seed                                           [1]
  sweep.figures         comma list of token_length, qps, tpt, memory         [all four]
  sweep.lengths         prompt lengths for the token-length sweep            [500:7000:500]
  sweep.modes           training modes for the token-length sweep            [cpt,cpa]
  sweep.qps             rates for the QPS sweep                              [0.02:0.2:0.02]
  sweep.qps_modes       training modes for the QPS sweep                     [cpa]
  sweep.min_tokens      prompt floors for the QPS sweep                      [4000]
  sweep.duration        arrival window of each QPS-sweep trace               [3000]
  sweep.seeds           paired trace seeds                                   [1,2,3,4]
  sweep.tpt_qps         rates for the TPT comparison                         [0.1,0.2,1.7]
  sweep.tpt_queries     expected queries per TPT trace                       [5000]
  sweep.pairs           (prompt:response) pairs for the memory comparison    [872:128,1872:128,2872:128]
  sweep.max_tokens_upper  search bound for max trainable tokens              [16000]

Numeric lists take commas and inclusive `start:end:step` ranges.
";

/// Environment variable naming a directory of `<name>.profile` files.
pub const PROFILE_DIR_ENV: &str = "REUSESIM_PROFILE_DIR";

const SIM_KEYS: &[&str] = &[
    "mode",
    "training",
    "cache_timeout",
    "max_batch",
    "baseline_budget",
    "maps",
    "trace",
    "qps",
    "duration",
    "lengths",
    "min_tokens",
    "output_tokens",
    "label_delay",
    "seed",
];

const SWEEP_KEYS: &[&str] = &[
    "figures",
    "lengths",
    "modes",
    "qps",
    "qps_modes",
    "min_tokens",
    "duration",
    "seeds",
    "tpt_qps",
    "tpt_queries",
    "pairs",
    "max_tokens_upper",
];

/// Raw entries of one config file, keyed by full dotted name.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub origin: String,
    pub base_dir: PathBuf,
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn parse(text: &str, origin: &str, base_dir: PathBuf) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", idx + 1))?;
            let key = k.trim().to_string();
            let Some((section, name)) = key.split_once('.') else {
                bail!("{origin}:{}: key `{key}` has no section prefix", idx + 1);
            };
            let known = match section {
                "model" | "gpu" => !name.is_empty(),
                "sim" => SIM_KEYS.contains(&name),
                "sweep" => SWEEP_KEYS.contains(&name),
                _ => false,
            };
            if !known {
                bail!("{origin}:{}: unknown key `{key}`", idx + 1);
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("{origin}:{}: duplicate key `{key}`", idx + 1);
            }
        }
        Ok(ConfigFile {
            origin: origin.to_string(),
            base_dir,
            entries,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| anyhow!("{}: bad value `{v}` for `{key}`: {e}", self.origin)),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base_dir.join(v))
    }

    /// Profile field overrides for `section` (`model` or `gpu`).
    fn overrides(&self, section: &str) -> Vec<(&str, &str)> {
        let prefix = format!("{section}.");
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|f| (f, v.as_str())))
            .filter(|(f, _)| *f != "profile")
            .collect()
    }

    /// Echo of the resolved entries, for provenance next to outputs.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Where a run's serving or training happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Colocated,
    SeparateCluster,
    ServingOnly,
}

impl std::str::FromStr for RunMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "colocated" => Ok(RunMode::Colocated),
            "separate_cluster" | "baseline" => Ok(RunMode::SeparateCluster),
            "serving_only" => Ok(RunMode::ServingOnly),
            other => bail!("unknown mode `{other}` (colocated, separate_cluster, serving_only)"),
        }
    }
}

/// Resolves a profile reference: an existing path, then `<dir>/<name>.profile`,
/// then a compiled-in preset.
fn profile_text(value: &str, dir: Option<&Path>, base: &Path, presets: &[&str]) -> Result<(String, String)> {
    let as_path = base.join(value);
    if as_path.is_file() {
        let text = std::fs::read_to_string(&as_path).with_context(|| format!("reading {}", as_path.display()))?;
        return Ok((text, as_path.display().to_string()));
    }
    if let Some(dir) = dir {
        let candidate = dir.join(format!("{value}.profile"));
        if candidate.is_file() {
            let text =
                std::fs::read_to_string(&candidate).with_context(|| format!("reading {}", candidate.display()))?;
            return Ok((text, candidate.display().to_string()));
        }
    }
    if presets.contains(&value) {
        return Ok((String::new(), format!("<preset {value}>")));
    }
    bail!(
        "profile `{value}` is not a file, not in the profile dir, and not a preset ({})",
        presets.join(", ")
    )
}

/// Applies `field = value` overrides on top of canonical profile text.
fn with_overrides(base: &str, overrides: &[(&str, &str)]) -> String {
    let mut lines: Vec<(String, String)> = base
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    for (field, value) in overrides {
        match lines.iter_mut().find(|(k, _)| k == field) {
            Some(entry) => entry.1 = value.to_string(),
            None => lines.push((field.to_string(), value.to_string())),
        }
    }
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn resolve_model(cfg: &ConfigFile, dir: Option<&Path>) -> Result<ModelProfile> {
    let name = cfg.get("model.profile").unwrap_or("llama-8b");
    let (text, origin) = profile_text(name, dir, &cfg.base_dir, reusesim::cost::MODEL_PRESETS)?;
    let base = if text.is_empty() {
        ModelProfile::preset(name)?
    } else {
        ModelProfile::parse(&text, &origin)?
    };
    let overrides = cfg.overrides("model");
    if overrides.is_empty() {
        return Ok(base);
    }
    Ok(ModelProfile::parse(&with_overrides(&base.to_text(), &overrides), &cfg.origin)?)
}

pub fn resolve_gpu(cfg: &ConfigFile, dir: Option<&Path>) -> Result<GpuProfile> {
    let name = cfg.get("gpu.profile").unwrap_or("a100-80g");
    let (text, origin) = profile_text(name, dir, &cfg.base_dir, reusesim::cost::GPU_PRESETS)?;
    let base = if text.is_empty() {
        GpuProfile::preset(name)?
    } else {
        GpuProfile::parse(&text, &origin)?
    };
    let overrides = cfg.overrides("gpu");
    if overrides.is_empty() {
        return Ok(base);
    }
    Ok(GpuProfile::parse(&with_overrides(&base.to_text(), &overrides), &cfg.origin)?)
}

/// Simulation knobs from the `sim.` section.
#[derive(Debug, Clone)]
pub struct SimSettings {
    pub mode: RunMode,
    pub training: TrainingMode,
    pub cache_timeout: f64,
    pub max_batch: u64,
    pub baseline_budget: Option<f64>,
    pub maps: Option<PathBuf>,
    pub trace_file: Option<PathBuf>,
    pub trace: TraceSpec,
    pub seed: u64,
}

pub fn parse_lengths(value: &str, base: &Path) -> Result<LengthDistribution> {
    let parts: Vec<&str> = value.split(':').collect();
    Ok(match parts.as_slice() {
        ["sharegpt"] => LengthDistribution::sharegpt_like(),
        ["fixed", n] => LengthDistribution::fixed(n.parse().context("fixed length")?),
        ["uniform", a, b] => LengthDistribution::uniform(a.parse().context("uniform min")?, b.parse().context("uniform max")?),
        _ => {
            let path = base.join(value);
            if !path.is_file() {
                bail!("lengths `{value}`: expected sharegpt, fixed:N, uniform:A:B or an existing histogram file");
            }
            LengthDistribution::load_histogram(&path)?
        }
    })
}

pub fn parse_label_delay(value: &str) -> Result<LabelDelay> {
    let parts: Vec<&str> = value.split(':').collect();
    Ok(match parts.as_slice() {
        ["never"] => LabelDelay::Never,
        ["uniform", a, b] => LabelDelay::Uniform {
            min: a.parse().context("label delay min")?,
            max: b.parse().context("label delay max")?,
        },
        [s] => LabelDelay::Fixed(s.parse().with_context(|| format!("label delay `{value}`"))?),
        _ => bail!("label delay `{value}`: expected seconds, uniform:A:B or never"),
    })
}

impl SimSettings {
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let lengths = parse_lengths(cfg.get("sim.lengths").unwrap_or("sharegpt"), &cfg.base_dir)?;
        let min_tokens = cfg.get("sim.min_tokens").map(str::parse::<u64>).transpose().context("sim.min_tokens")?;
        let mut trace = TraceSpec::new(
            cfg.parsed("sim.qps", 0.2)?,
            cfg.parsed("sim.duration", 600.0)?,
            lengths.with_min_tokens(min_tokens),
        );
        trace.output_tokens = cfg.parsed("sim.output_tokens", 128)?;
        trace.label_delay = parse_label_delay(cfg.get("sim.label_delay").unwrap_or("0.01"))?;
        let training: TrainingMode = match cfg.get("sim.training") {
            Some(v) => v.parse()?,
            None => TrainingMode::Cpa,
        };
        let settings = SimSettings {
            mode: cfg.parsed("sim.mode", RunMode::Colocated)?,
            training,
            cache_timeout: cfg.parsed("sim.cache_timeout", reusesim::engine::DEFAULT_CACHE_TIMEOUT)?,
            max_batch: cfg.parsed("sim.max_batch", 50)?,
            baseline_budget: cfg.get("sim.baseline_budget").map(str::parse).transpose().context("sim.baseline_budget")?,
            maps: cfg.path("sim.maps"),
            trace_file: cfg.path("sim.trace"),
            trace,
            seed: cfg.parsed("sim.seed", 1)?,
        };
        settings.check_files()?;
        Ok(settings)
    }

    /// Every referenced file must exist before anything runs.
    pub fn check_files(&self) -> Result<()> {
        if let Some(p) = &self.trace_file {
            if !p.is_file() {
                bail!("trace file {} does not exist", p.display());
            }
        }
        if let Some(dir) = &self.maps {
            for kind in ["offloading", "hedging"] {
                let p = map_path(dir, kind, self.training);
                if !p.is_file() {
                    bail!("map file {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }
}

pub fn map_path(dir: &Path, kind: &str, mode: TrainingMode) -> PathBuf {
    dir.join(format!("{kind}-{mode}.map"))
}

/// Comma list where each item is a value or an inclusive `start:end:step`.
pub fn parse_f64_list(value: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [v] => out.push(v.parse().with_context(|| format!("list item `{item}`"))?),
            [a, b, s] => {
                let (a, b, s): (f64, f64, f64) = (a.parse()?, b.parse()?, s.parse()?);
                if s.is_nan() || s <= 0.0 || b < a {
                    bail!("range `{item}` needs start <= end and a positive step");
                }
                let n = ((b - a) / s + 1e-9).floor() as usize;
                // Decimal steps such as 0.02 are rebuilt from the index so
                // the values print cleanly.
                let scale = 1e9;
                out.extend((0..=n).map(|i| ((a + s * i as f64) * scale).round() / scale));
            }
            _ => bail!("list item `{item}`: expected a value or start:end:step"),
        }
    }
    Ok(out)
}

pub fn parse_u64_list(value: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [v] => out.push(v.parse().with_context(|| format!("list item `{item}`"))?),
            [a, b, s] => {
                let (a, b, s): (u64, u64, u64) = (a.parse()?, b.parse()?, s.parse()?);
                if s == 0 || b < a {
                    bail!("range `{item}` needs start <= end and a positive step");
                }
                out.extend((a..=b).step_by(s as usize));
            }
            _ => bail!("list item `{item}`: expected a value or start:end:step"),
        }
    }
    Ok(out)
}

pub fn parse_modes(value: &str) -> Result<Vec<TrainingMode>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<TrainingMode>().map_err(Into::into))
        .collect()
}

/// Which datasets `compare` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    TokenLength,
    Qps,
    Tpt,
    Memory,
}

/// Sweep axes from the `sweep.` section.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub figures: Vec<Figure>,
    pub lengths: Vec<u64>,
    pub modes: Vec<TrainingMode>,
    pub qps: Vec<f64>,
    pub qps_modes: Vec<TrainingMode>,
    pub min_tokens: Vec<u64>,
    pub duration: f64,
    pub seeds: Vec<u64>,
    pub tpt_qps: Vec<f64>,
    pub tpt_queries: u64,
    pub pairs: Vec<(u64, u64)>,
    pub max_tokens_upper: u64,
}

impl SweepSettings {
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let figures = cfg
            .get("sweep.figures")
            .unwrap_or("token_length,qps,tpt,memory")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "token_length" => Ok(Figure::TokenLength),
                "qps" => Ok(Figure::Qps),
                "tpt" => Ok(Figure::Tpt),
                "memory" => Ok(Figure::Memory),
                other => Err(anyhow!("unknown figure `{other}`")),
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = cfg
            .get("sweep.pairs")
            .unwrap_or("872:128,1872:128,2872:128")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|p| {
                let (a, b) = p.split_once(':').ok_or_else(|| anyhow!("pair `{p}`: expected P:R"))?;
                Ok((a.parse()?, b.parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = SweepSettings {
            figures,
            lengths: parse_u64_list(cfg.get("sweep.lengths").unwrap_or("500:7000:500"))?,
            modes: parse_modes(cfg.get("sweep.modes").unwrap_or("cpt,cpa"))?,
            qps: parse_f64_list(cfg.get("sweep.qps").unwrap_or("0.02:0.2:0.02"))?,
            qps_modes: parse_modes(cfg.get("sweep.qps_modes").unwrap_or("cpa"))?,
            min_tokens: parse_u64_list(cfg.get("sweep.min_tokens").unwrap_or("4000"))?,
            duration: cfg.parsed("sweep.duration", 3000.0)?,
            seeds: parse_u64_list(cfg.get("sweep.seeds").unwrap_or("1,2,3,4"))?,
            tpt_qps: parse_f64_list(cfg.get("sweep.tpt_qps").unwrap_or("0.1,0.2,1.7"))?,
            tpt_queries: cfg.parsed("sweep.tpt_queries", 5000)?,
            pairs,
            max_tokens_upper: cfg.parsed("sweep.max_tokens_upper", 16_000)?,
        };
        s.validate()?;
        Ok(s)
    }

    /// Rejects empty axes before any simulation starts.
    pub fn validate(&self) -> Result<()> {
        if self.figures.is_empty() {
            bail!("sweep.figures is empty");
        }
        for fig in &self.figures {
            let empty = match fig {
                Figure::TokenLength => [("sweep.lengths", self.lengths.is_empty()), ("sweep.modes", self.modes.is_empty())],
                Figure::Qps => [("sweep.qps", self.qps.is_empty()), ("sweep.seeds", self.seeds.is_empty())],
                Figure::Tpt => [("sweep.tpt_qps", self.tpt_qps.is_empty()), ("sweep.tpt_queries", self.tpt_queries == 0)],
                Figure::Memory => [("sweep.pairs", self.pairs.is_empty()), ("sweep.max_tokens_upper", self.max_tokens_upper == 0)],
            };
            if let Some((key, _)) = empty.iter().find(|(_, e)| *e) {
                bail!("{key} is empty");
            }
        }
        if self.figures.contains(&Figure::Qps) && (self.qps_modes.is_empty() || self.min_tokens.is_empty()) {
            bail!("sweep.qps_modes and sweep.min_tokens must be nonempty");
        }
        if self.qps.iter().chain(&self.tpt_qps).any(|q| !(q.is_finite() && *q > 0.0)) {
            bail!("sweep rates must be positive");
        }
        Ok(())
    }
}
