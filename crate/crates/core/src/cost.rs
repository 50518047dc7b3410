//! Closed-form latency and memory model.
//!
//! Every duration (seconds) and byte count used by the simulator comes from
//! here. The functions are pure: identical inputs give bit-identical outputs,
//! which is what makes offline map profiling valid.
//!
//! Shipped profiles live in `profiles/*.profile` as plain `key = value` text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which continual-learning workload the trainer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Continual pretraining: loss over the prompt, backward only reuses
    /// the prefill activations.
    Cpt,
    /// Continual preference alignment (DPO-style): two response forwards
    /// sharing the prompt KV cache, then backward.
    Cpa,
}

impl TrainingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Cpt => "cpt",
            TrainingMode::Cpa => "cpa",
        }
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpt" => Ok(TrainingMode::Cpt),
            "cpa" | "dpo" => Ok(TrainingMode::Cpa),
            other => Err(Error::invalid("training mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

/// Per-model analytic constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub num_layers: u32,
    /// K and V bytes for one token, summed over all layers.
    pub kv_bytes_per_token: u64,
    /// Recorded activation bytes per token per layer (adapter-only regime).
    pub act_bytes_per_token_per_layer: u64,
    /// Seconds per prompt token.
    pub prefill_coef_linear: f64,
    /// Seconds per squared prompt token (attention term).
    pub prefill_coef_quad: f64,
    /// Seconds per decode step.
    pub decode_coef_const: f64,
    /// Seconds per context token per decode step.
    pub decode_coef_context: f64,
    /// Per-layer backward cost over per-layer forward cost.
    pub backward_to_forward_ratio: f64,
    pub record_prefill_multiplier: f64,
    pub record_decode_multiplier: f64,
    pub weights_bytes: u64,
    /// Transient serving workspace as a multiple of the batch KV bytes.
    pub workspace_factor: f64,
}

/// Device capacity and host link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile {
    pub name: String,
    pub capacity_bytes: u64,
    /// Bytes per second.
    pub h2d_bandwidth: f64,
    /// Bytes per second.
    pub d2h_bandwidth: f64,
    pub runtime_reserve_bytes: u64,
}

const LLAMA_8B: &str = include_str!("../profiles/llama-8b.profile");
const MISTRAL_7B: &str = include_str!("../profiles/mistral-7b.profile");
const PHI_14B: &str = include_str!("../profiles/phi-14b.profile");
const A100_80G: &str = include_str!("../profiles/a100-80g.profile");

/// Names of the model profiles compiled into the library.
pub const MODEL_PRESETS: &[&str] = &["llama-8b", "mistral-7b", "phi-14b"];
pub const GPU_PRESETS: &[&str] = &["a100-80g"];

fn check_nonzero(what: &str, v: u64) -> Result<()> {
    if v == 0 {
        return Err(Error::Contract(format!("{what} must be >= 1")));
    }
    Ok(())
}

impl ModelProfile {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "llama-8b" => LLAMA_8B,
            "mistral-7b" => MISTRAL_7B,
            "phi-14b" => PHI_14B,
            other => {
                return Err(Error::invalid(
                    "model profile",
                    format!("no preset named `{other}` (have {})", MODEL_PRESETS.join(", ")),
                ))
            }
        };
        Self::parse(text, &format!("<preset {name}>"))
    }

    /// The calibrated default profile.
    pub fn llama_8b() -> Self {
        Self::preset("llama-8b").expect("shipped profile parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let p = ModelProfile {
            name: kv.take_or("name", "unnamed".to_string())?,
            num_layers: kv.take("num_layers")?,
            kv_bytes_per_token: kv.take("kv_bytes_per_token")?,
            act_bytes_per_token_per_layer: kv.take("act_bytes_per_token_per_layer")?,
            prefill_coef_linear: kv.take("prefill_coef_linear")?,
            prefill_coef_quad: kv.take("prefill_coef_quad")?,
            decode_coef_const: kv.take("decode_coef_const")?,
            decode_coef_context: kv.take("decode_coef_context")?,
            backward_to_forward_ratio: kv.take("backward_to_forward_ratio")?,
            record_prefill_multiplier: kv.take_or("record_prefill_multiplier", 1.21)?,
            record_decode_multiplier: kv.take_or("record_decode_multiplier", 1.35)?,
            weights_bytes: kv.take("weights_bytes")?,
            workspace_factor: kv.take_or("workspace_factor", 1.0)?,
        };
        kv.finish()?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid("model profile", format!("{field} {why}")));
        if self.num_layers == 0 {
            return bad("num_layers", "must be positive");
        }
        if self.kv_bytes_per_token == 0 {
            return bad("kv_bytes_per_token", "must be positive");
        }
        if self.act_bytes_per_token_per_layer == 0 {
            return bad("act_bytes_per_token_per_layer", "must be positive");
        }
        if self.weights_bytes == 0 {
            return bad("weights_bytes", "must be positive");
        }
        for (field, v) in [
            ("prefill_coef_linear", self.prefill_coef_linear),
            ("prefill_coef_quad", self.prefill_coef_quad),
            ("decode_coef_const", self.decode_coef_const),
            ("decode_coef_context", self.decode_coef_context),
            ("backward_to_forward_ratio", self.backward_to_forward_ratio),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, "must be finite and positive");
            }
        }
        for (field, v) in [
            ("record_prefill_multiplier", self.record_prefill_multiplier),
            ("record_decode_multiplier", self.record_decode_multiplier),
        ] {
            if !(v.is_finite() && v >= 1.0) {
                return bad(field, "must be >= 1.0");
            }
        }
        if !(self.workspace_factor.is_finite() && self.workspace_factor >= 0.0) {
            return bad("workspace_factor", "must be finite and nonnegative");
        }
        Ok(())
    }

    /// Canonical `key = value` text; also the input to [`profile_hash`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "kv_bytes_per_token = {}", self.kv_bytes_per_token);
        let _ = writeln!(s, "act_bytes_per_token_per_layer = {}", self.act_bytes_per_token_per_layer);
        let _ = writeln!(s, "prefill_coef_linear = {:?}", self.prefill_coef_linear);
        let _ = writeln!(s, "prefill_coef_quad = {:?}", self.prefill_coef_quad);
        let _ = writeln!(s, "decode_coef_const = {:?}", self.decode_coef_const);
        let _ = writeln!(s, "decode_coef_context = {:?}", self.decode_coef_context);
        let _ = writeln!(s, "backward_to_forward_ratio = {:?}", self.backward_to_forward_ratio);
        let _ = writeln!(s, "record_prefill_multiplier = {:?}", self.record_prefill_multiplier);
        let _ = writeln!(s, "record_decode_multiplier = {:?}", self.record_decode_multiplier);
        let _ = writeln!(s, "weights_bytes = {}", self.weights_bytes);
        let _ = writeln!(s, "workspace_factor = {:?}", self.workspace_factor);
        s
    }

    // ---- latency ----

    /// Whole-model prefill of `batch` prompts of `tokens` each.
    pub fn prefill_latency(&self, tokens: u64, batch: u64, recording: bool) -> Result<f64> {
        check_nonzero("tokens", tokens)?;
        check_nonzero("batch", batch)?;
        let t = tokens as f64;
        let base = batch as f64 * (self.prefill_coef_linear * t + self.prefill_coef_quad * t * t);
        Ok(if recording {
            base * self.record_prefill_multiplier
        } else {
            base
        })
    }

    /// One decode step for `batch` sequences at `context_tokens` context.
    pub fn decode_step_latency(&self, context_tokens: u64, batch: u64, recording: bool) -> Result<f64> {
        check_nonzero("context_tokens", context_tokens)?;
        check_nonzero("batch", batch)?;
        let base = batch as f64 * (self.decode_coef_const + self.decode_coef_context * context_tokens as f64);
        Ok(if recording {
            base * self.record_decode_multiplier
        } else {
            base
        })
    }

    /// One layer's share of an unrecorded single-sequence prefill.
    pub fn forward_layer_latency(&self, tokens: u64) -> Result<f64> {
        Ok(self.prefill_latency(tokens, 1, false)? / self.num_layers as f64)
    }

    pub fn backward_layer_latency(&self, tokens: u64) -> Result<f64> {
        Ok(self.backward_to_forward_ratio * self.forward_layer_latency(tokens)?)
    }

    /// Forward of `tokens` new tokens attending over `context` cached tokens
    /// (whole model, batch 1). Equals `prefill_latency(tokens)` at zero context.
    pub fn extend_latency(&self, context: u64, tokens: u64) -> Result<f64> {
        check_nonzero("tokens", tokens)?;
        let c = context as f64;
        let t = tokens as f64;
        let end = c + t;
        Ok(self.prefill_coef_linear * t + self.prefill_coef_quad * (end * end - c * c))
    }

    // ---- memory ----

    pub fn activation_bytes(&self, tokens: u64, layers: u32) -> Result<u64> {
        if layers > self.num_layers {
            return Err(Error::Contract(format!(
                "layers {layers} exceeds num_layers {}",
                self.num_layers
            )));
        }
        Ok(tokens * layers as u64 * self.act_bytes_per_token_per_layer)
    }

    /// Activation bytes held by one layer for `tokens` tokens.
    pub fn layer_activation_bytes(&self, tokens: u64) -> u64 {
        tokens * self.act_bytes_per_token_per_layer
    }

    pub fn kv_bytes(&self, tokens: u64, batch: u64) -> u64 {
        batch * tokens * self.kv_bytes_per_token
    }

    /// KV bytes plus transient workspace for a serving batch.
    pub fn serving_memory(&self, tokens: u64, batch: u64) -> Result<u64> {
        check_nonzero("tokens", tokens)?;
        check_nonzero("batch", batch)?;
        let kv = self.kv_bytes(tokens, batch);
        let workspace = (self.workspace_factor * kv as f64).ceil() as u64;
        Ok(kv + workspace)
    }

    // ---- training iterations ----

    /// Tokens whose activations a cached training sample holds.
    pub fn activation_tokens(&self, mode: TrainingMode, prompt: u64, output: u64) -> u64 {
        match mode {
            TrainingMode::Cpt => prompt,
            TrainingMode::Cpa => prompt + 2 * output,
        }
    }

    /// Tokens one training sample contributes to the trained-token count.
    pub fn trained_tokens(&self, mode: TrainingMode, prompt: u64, output: u64) -> u64 {
        self.activation_tokens(mode, prompt, output)
    }

    /// Forward time needed to rebuild a dropped sample of `cached_tokens`
    /// activation tokens. In CPA the prompt KV stays shared, so only the two
    /// response forwards are redone.
    pub fn recompute_time(&self, mode: TrainingMode, cached_tokens: u64, output_tokens: u64) -> Result<f64> {
        check_nonzero("cached_tokens", cached_tokens)?;
        match mode {
            TrainingMode::Cpt => self.prefill_latency(cached_tokens, 1, false),
            TrainingMode::Cpa => {
                let response = output_tokens.min(cached_tokens / 2);
                if response == 0 {
                    return self.prefill_latency(cached_tokens, 1, false);
                }
                let prompt = cached_tokens - 2 * response;
                Ok(2.0 * self.extend_latency(prompt, response)?)
            }
        }
    }

    /// Uncontended training iteration when serving activations are reused.
    pub fn colocated_iteration(&self, mode: TrainingMode, prompt: u64, output: u64) -> Result<f64> {
        let act = self.activation_tokens(mode, prompt, output);
        let backward = self.num_layers as f64 * self.backward_layer_latency(act)?;
        match mode {
            TrainingMode::Cpt => Ok(backward),
            TrainingMode::Cpa => Ok(2.0 * self.extend_latency(prompt, output)? + backward),
        }
    }

    /// Training iteration on a separate device that recomputes everything.
    pub fn baseline_iteration(&self, mode: TrainingMode, prompt: u64, output: u64) -> Result<f64> {
        let forward = match mode {
            TrainingMode::Cpt => self.prefill_latency(prompt, 1, false)?,
            TrainingMode::Cpa => 2.0 * self.prefill_latency(prompt + output, 1, false)?,
        };
        Ok(forward * (1.0 + self.backward_to_forward_ratio))
    }

    /// Peak training activation bytes with activation reuse and KV sharing.
    pub fn colocated_activation_footprint(&self, mode: TrainingMode, prompt: u64, output: u64) -> u64 {
        self.activation_tokens(mode, prompt, output) * self.num_layers as u64 * self.act_bytes_per_token_per_layer
    }

    /// Peak training activation bytes without reuse: CPA runs two full
    /// prompt+response forwards, duplicating the prompt activations.
    pub fn baseline_activation_footprint(&self, mode: TrainingMode, prompt: u64, output: u64) -> u64 {
        let tokens = match mode {
            TrainingMode::Cpt => prompt,
            TrainingMode::Cpa => 2 * (prompt + output),
        };
        tokens * self.num_layers as u64 * self.act_bytes_per_token_per_layer
    }

    /// KV bytes a cached sample keeps on device (CPA only).
    pub fn cached_kv_bytes(&self, mode: TrainingMode, cached_tokens: u64) -> u64 {
        match mode {
            TrainingMode::Cpt => 0,
            TrainingMode::Cpa => self.kv_bytes(cached_tokens, 1),
        }
    }
}

impl GpuProfile {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "a100-80g" => Self::parse(A100_80G, "<preset a100-80g>"),
            other => Err(Error::invalid(
                "gpu profile",
                format!("no preset named `{other}` (have {})", GPU_PRESETS.join(", ")),
            )),
        }
    }

    pub fn a100_80g() -> Self {
        Self::preset("a100-80g").expect("shipped profile parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let g = GpuProfile {
            name: kv.take_or("name", "unnamed".to_string())?,
            capacity_bytes: kv.take("capacity_bytes")?,
            h2d_bandwidth: kv.take("h2d_bandwidth")?,
            d2h_bandwidth: kv.take("d2h_bandwidth")?,
            runtime_reserve_bytes: kv.take("runtime_reserve_bytes")?,
        };
        kv.finish()?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_bytes == 0 {
            return Err(Error::invalid("gpu profile", "capacity_bytes must be positive"));
        }
        for (field, v) in [("h2d_bandwidth", self.h2d_bandwidth), ("d2h_bandwidth", self.d2h_bandwidth)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("gpu profile", format!("{field} must be finite and positive")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "capacity_bytes = {}", self.capacity_bytes);
        let _ = writeln!(s, "h2d_bandwidth = {:?}", self.h2d_bandwidth);
        let _ = writeln!(s, "d2h_bandwidth = {:?}", self.d2h_bandwidth);
        let _ = writeln!(s, "runtime_reserve_bytes = {}", self.runtime_reserve_bytes);
        s
    }

    pub fn transfer_time(&self, bytes: u64, direction: Direction) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        let bw = match direction {
            Direction::HostToDevice => self.h2d_bandwidth,
            Direction::DeviceToHost => self.d2h_bandwidth,
        };
        bytes as f64 / bw
    }
}

/// Bytes permanently held on the device: weights plus runtime reserve.
pub fn static_bytes(model: &ModelProfile, gpu: &GpuProfile) -> u64 {
    model.weights_bytes + gpu.runtime_reserve_bytes
}

/// Rejects profile pairs that leave no room beyond weights and reserve.
pub fn validate_pair(model: &ModelProfile, gpu: &GpuProfile) -> Result<()> {
    let fixed = static_bytes(model, gpu);
    if fixed >= gpu.capacity_bytes {
        return Err(Error::invalid(
            "profile pair",
            format!(
                "weights ({}) + reserve ({}) >= capacity ({})",
                model.weights_bytes, gpu.runtime_reserve_bytes, gpu.capacity_bytes
            ),
        ));
    }
    Ok(())
}

/// Short content hash of a model/gpu pair, stamped into map files.
pub fn profile_hash(model: &ModelProfile, gpu: &GpuProfile) -> String {
    let mut h = Sha256::new();
    h.update(model.to_text().as_bytes());
    h.update(b"--\n");
    h.update(gpu.to_text().as_bytes());
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// `key = value` lines with `#` comments. Tracks which keys were consumed so
/// unknown keys can be rejected.
pub(crate) struct KeyValues {
    origin: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub(crate) fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: idx + 1,
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), idx + 1)).is_some() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: idx + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            entries,
        })
    }

    pub(crate) fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        match self.entries.remove(key) {
            Some((v, line)) => v.parse().map_err(|_| Error::Parse {
                path: self.origin.clone(),
                line,
                reason: format!("bad value `{v}` for key `{key}`"),
            }),
            None => Err(Error::invalid(
                self.origin.clone(),
                format!("missing required key `{key}`"),
            )),
        }
    }

    pub(crate) fn take_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        if self.entries.contains_key(key) {
            self.take(key)
        } else {
            Ok(default)
        }
    }

    pub(crate) fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                path: self.origin,
                line,
                reason: format!("unknown key `{key}`"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama() -> ModelProfile {
        ModelProfile::llama_8b()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn prefill_examples() {
        let m = llama();
        let off = m.prefill_latency(1000, 1, false).unwrap();
        assert!(close(off, 0.120, 1e-12), "{off}");
        let on = m.prefill_latency(1000, 1, true).unwrap();
        assert!(close(on, 0.1452, 1e-12), "{on}");
        let one = m.prefill_latency(1, 1, false).unwrap();
        assert!(close(one, m.prefill_coef_linear, 1e-7));
        assert!(m.prefill_latency(0, 1, false).is_err());
        assert!(m.prefill_latency(10, 0, false).is_err());
    }

    #[test]
    fn decode_examples() {
        let m = llama();
        let off = m.decode_step_latency(1000, 1, false).unwrap();
        assert!(close(off, 0.022, 1e-12));
        let on = m.decode_step_latency(1000, 1, true).unwrap();
        assert!(close(on, 0.0297, 1e-12));
        let two = m.decode_step_latency(1000, 2, false).unwrap();
        assert_eq!(two, 2.0 * off);
        assert!(m.decode_step_latency(0, 1, false).is_err());
    }

    #[test]
    fn per_layer_partition() {
        let m = llama();
        assert!(close(m.forward_layer_latency(1000).unwrap(), 0.00375, 1e-12));
        assert!(close(m.forward_layer_latency(4000).unwrap(), 0.0225, 1e-12));
        for tokens in [1, 17, 1000, 4000, 7919] {
            // Repeated float addition can drift by a few ulps.
            let sum: f64 = (0..m.num_layers).map(|_| m.forward_layer_latency(tokens).unwrap()).sum();
            let whole = m.prefill_latency(tokens, 1, false).unwrap();
            assert!((sum - whole).abs() <= 1e-12 * whole, "{sum} vs {whole}");
            let scaled = m.forward_layer_latency(tokens).unwrap() * m.num_layers as f64;
            assert_eq!(scaled, whole);
        }
    }

    #[test]
    fn backward_share_matches_calibration() {
        let m = llama();
        let b = m.backward_layer_latency(1000).unwrap();
        assert!(close(b, 0.00375 * 1.326, 1e-12));
        let share = 1.0 / (1.0 + m.backward_to_forward_ratio);
        assert!((0.42..=0.44).contains(&share), "{share}");
        let mut unit = m.clone();
        unit.backward_to_forward_ratio = 1.0;
        assert_eq!(unit.backward_layer_latency(500).unwrap(), unit.forward_layer_latency(500).unwrap());
    }

    #[test]
    fn memory_examples() {
        let m = llama();
        let full = m.activation_bytes(3000, 32).unwrap() as f64;
        assert!((39.6e9..=40.4e9).contains(&full), "{full}");
        let one = m.activation_bytes(3000, 1).unwrap() as f64;
        assert!(close(one, 1.251e9, 1e6));
        assert_eq!(m.activation_bytes(0, 7).unwrap(), 0);
        assert!(m.activation_bytes(10, 33).is_err());

        const MIB: u64 = 1 << 20;
        assert_eq!(m.kv_bytes(3000, 1), 1500 * MIB);
        assert_eq!(m.kv_bytes(500, 5), 1250 * MIB);
        assert_eq!(m.kv_bytes(0, 5), 0);
        assert_eq!(m.serving_memory(500, 5).unwrap(), 2500 * MIB);
        assert_eq!(m.serving_memory(500, 10).unwrap(), 2 * m.serving_memory(500, 5).unwrap());
    }

    #[test]
    fn transfer_examples() {
        let g = GpuProfile::a100_80g();
        let t = g.transfer_time(53_400_000_000, Direction::HostToDevice);
        assert!(close(t, 2.225, 1e-9));
        assert_eq!(g.transfer_time(0, Direction::DeviceToHost), 0.0);
        let mut slow = g.clone();
        slow.h2d_bandwidth = 12e9;
        assert_eq!(
            slow.transfer_time(1_000_000, Direction::HostToDevice),
            2.0 * g.transfer_time(1_000_000, Direction::HostToDevice)
        );
    }

    #[test]
    fn iteration_examples() {
        let m = llama();
        let colo = m.colocated_iteration(TrainingMode::Cpt, 1000, 128).unwrap();
        let base = m.baseline_iteration(TrainingMode::Cpt, 1000, 128).unwrap();
        assert!(close(colo, 0.15912, 1e-9));
        assert!(close(base, 0.27912, 1e-9));
        assert!(close(base / colo, 2.326 / 1.326, 1e-12));
    }

    #[test]
    fn extend_reduces_to_prefill() {
        let m = llama();
        assert_eq!(m.extend_latency(0, 640).unwrap(), m.prefill_latency(640, 1, false).unwrap());
    }

    #[test]
    fn profile_text_roundtrip_and_rejections() {
        let m = llama();
        assert_eq!(ModelProfile::parse(&m.to_text(), "t").unwrap(), m);
        let g = GpuProfile::a100_80g();
        assert_eq!(GpuProfile::parse(&g.to_text(), "t").unwrap(), g);

        let unknown = format!("{}bogus = 1\n", m.to_text());
        let err = ModelProfile::parse(&unknown, "t").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        let missing: String = m.to_text().lines().filter(|l| !l.starts_with("num_layers")).map(|l| format!("{l}\n")).collect();
        let err = ModelProfile::parse(&missing, "t").unwrap_err().to_string();
        assert!(err.contains("num_layers"), "{err}");
    }

    #[test]
    fn pair_validation() {
        let m = llama();
        let mut g = GpuProfile::a100_80g();
        assert!(validate_pair(&m, &g).is_ok());
        g.capacity_bytes = m.weights_bytes + g.runtime_reserve_bytes;
        assert!(validate_pair(&m, &g).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let m = llama();
        let g = GpuProfile::a100_80g();
        assert_eq!(profile_hash(&m, &g), profile_hash(&m.clone(), &g.clone()));
        let mut m2 = m.clone();
        m2.decode_coef_const = 0.021;
        assert_ne!(profile_hash(&m, &g), profile_hash(&m2, &g));
    }
}
