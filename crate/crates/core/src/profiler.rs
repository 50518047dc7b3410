//! Offline offloading and hedging maps.
//!
//! Both maps are computed from the cost model rather than measured, so every
//! cell can be checked exhaustively against the memory formulas. Lookups
//! round inputs up to the next grid step.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{profile_hash, static_bytes, validate_pair, GpuProfile, ModelProfile, TrainingMode};
use crate::error::{Error, Result};

/// What to do with cached activations before a serving batch runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OffloadDecision {
    NoAction,
    /// Free this many of the lowest layers to host.
    FreeLayers(u32),
    /// Keep nothing on device: activations live on host only and any cached
    /// KV is dropped.
    AllToHost,
}

impl OffloadDecision {
    /// Layers the decision frees, with `AllToHost` counting as all of them.
    pub fn layers(self, num_layers: u32) -> u32 {
        match self {
            OffloadDecision::NoAction => 0,
            OffloadDecision::FreeLayers(n) => n,
            OffloadDecision::AllToHost => num_layers,
        }
    }

    fn encode(self) -> String {
        match self {
            OffloadDecision::NoAction => "none".to_string(),
            OffloadDecision::FreeLayers(n) => format!("free:{n}"),
            OffloadDecision::AllToHost => "all_to_host".to_string(),
        }
    }

    fn decode(s: &str) -> Option<Self> {
        match s {
            "none" => Some(OffloadDecision::NoAction),
            "all_to_host" => Some(OffloadDecision::AllToHost),
            _ => s.strip_prefix("free:")?.parse().ok().map(OffloadDecision::FreeLayers),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HedgeDecision {
    LoadBack,
    Recompute,
}

/// Step sizes and upper bounds of the offloading grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cached_step: u64,
    pub incoming_step: u64,
    pub batch_step: u64,
    pub max_cached: u64,
    pub max_incoming: u64,
    pub max_batch: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            cached_step: 500,
            incoming_step: 500,
            batch_step: 5,
            max_cached: 8000,
            max_incoming: 8000,
            max_batch: 50,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (axis, step, bound) in [
            ("cached", self.cached_step, self.max_cached),
            ("incoming", self.incoming_step, self.max_incoming),
            ("batch", self.batch_step, self.max_batch),
        ] {
            if step == 0 || bound == 0 {
                return Err(Error::invalid(
                    format!("{axis} axis"),
                    "step and bound must be positive",
                ));
            }
            if bound % step != 0 {
                return Err(Error::invalid(
                    format!("{axis} axis"),
                    format!("bound {bound} is not a multiple of step {step}"),
                ));
            }
        }
        Ok(())
    }

    fn cached_buckets(&self) -> usize {
        (self.max_cached / self.cached_step) as usize + 1
    }

    fn incoming_buckets(&self) -> usize {
        (self.max_incoming / self.incoming_step) as usize
    }

    fn batch_buckets(&self) -> usize {
        (self.max_batch / self.batch_step) as usize
    }
}

/// Index of the bucket `value` rounds up to, where bucket `i` covers
/// `i * step`. Values above `bound` are out of range.
fn round_up_index(axis: &'static str, value: u64, step: u64, bound: u64) -> Result<usize> {
    let idx = value.div_ceil(step);
    if idx * step > bound {
        return Err(Error::OutOfRange { axis, value, bound });
    }
    Ok(idx as usize)
}

/// (cached tokens, incoming tokens, batch) → offload decision.
#[derive(Debug, Clone, PartialEq)]
pub struct OffloadingMap {
    pub grid: GridSpec,
    pub training_mode: TrainingMode,
    pub num_layers: u32,
    pub profile_hash: String,
    cells: Vec<OffloadDecision>,
}

/// Memory arithmetic behind one offloading-map cell, exposed so tests and
/// the CLI can show their work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBudget {
    /// Capacity minus weights and runtime reserve.
    pub available: u64,
    pub cached_activation: u64,
    pub cached_kv: u64,
    pub per_layer: u64,
    pub need: u64,
}

impl CellBudget {
    pub fn compute(
        model: &ModelProfile,
        gpu: &GpuProfile,
        mode: TrainingMode,
        cached: u64,
        incoming: u64,
        batch: u64,
    ) -> Result<Self> {
        Ok(CellBudget {
            available: gpu.capacity_bytes - static_bytes(model, gpu),
            cached_activation: model.activation_bytes(cached, model.num_layers)?,
            cached_kv: model.cached_kv_bytes(mode, cached),
            per_layer: model.layer_activation_bytes(cached),
            need: model.serving_memory(incoming, batch)?,
        })
    }

    /// Device headroom left for serving with `freed` layers moved to host.
    /// Negative when the cached sample alone does not fit.
    pub fn headroom_after(&self, freed: u32) -> i128 {
        let retained = self.cached_activation as i128 - freed as i128 * self.per_layer as i128;
        self.available as i128 - retained - self.cached_kv as i128
    }

    pub fn decide(&self, num_layers: u32) -> OffloadDecision {
        let cached_total = self.cached_activation as u128 + self.cached_kv as u128;
        if cached_total > self.available as u128 {
            return OffloadDecision::AllToHost;
        }
        let headroom = self.headroom_after(0);
        let need = self.need as i128;
        if need <= headroom {
            return OffloadDecision::NoAction;
        }
        if self.per_layer == 0 {
            return OffloadDecision::AllToHost;
        }
        let deficit = (need - headroom) as u128;
        let n = deficit.div_ceil(self.per_layer as u128);
        if n <= num_layers as u128 {
            OffloadDecision::FreeLayers(n as u32)
        } else {
            OffloadDecision::AllToHost
        }
    }
}

impl OffloadingMap {
    pub fn build(model: &ModelProfile, gpu: &GpuProfile, grid: GridSpec, mode: TrainingMode) -> Result<Self> {
        grid.validate()?;
        validate_pair(model, gpu)?;
        let mut cells =
            Vec::with_capacity(grid.cached_buckets() * grid.incoming_buckets() * grid.batch_buckets());
        for ci in 0..grid.cached_buckets() {
            let cached = ci as u64 * grid.cached_step;
            for ii in 0..grid.incoming_buckets() {
                let incoming = (ii as u64 + 1) * grid.incoming_step;
                for bi in 0..grid.batch_buckets() {
                    let batch = (bi as u64 + 1) * grid.batch_step;
                    let budget = CellBudget::compute(model, gpu, mode, cached, incoming, batch)?;
                    cells.push(budget.decide(model.num_layers));
                }
            }
        }
        Ok(OffloadingMap {
            grid,
            training_mode: mode,
            num_layers: model.num_layers,
            profile_hash: profile_hash(model, gpu),
            cells,
        })
    }

    fn index(&self, ci: usize, ii: usize, bi: usize) -> usize {
        (ci * self.grid.incoming_buckets() + ii) * self.grid.batch_buckets() + bi
    }

    /// Decision for the bucket each input rounds up to.
    pub fn lookup(&self, cached: u64, incoming: u64, batch: u64) -> Result<OffloadDecision> {
        if incoming == 0 || batch == 0 {
            return Err(Error::Contract("incoming tokens and batch must be >= 1".into()));
        }
        let ci = round_up_index("cached", cached, self.grid.cached_step, self.grid.max_cached)?;
        let ii = round_up_index("incoming", incoming, self.grid.incoming_step, self.grid.max_incoming)? - 1;
        let bi = round_up_index("batch", batch, self.grid.batch_step, self.grid.max_batch)? - 1;
        Ok(self.cells[self.index(ci, ii, bi)])
    }

    /// Every cell with its bucket coordinates, in file order.
    pub fn cells(&self) -> impl Iterator<Item = (u64, u64, u64, OffloadDecision)> + '_ {
        let g = self.grid;
        let (ni, nb) = (g.incoming_buckets(), g.batch_buckets());
        self.cells.iter().enumerate().map(move |(k, d)| {
            let ci = k / (ni * nb);
            let ii = (k / nb) % ni;
            let bi = k % nb;
            (
                ci as u64 * g.cached_step,
                (ii as u64 + 1) * g.incoming_step,
                (bi as u64 + 1) * g.batch_step,
                *d,
            )
        })
    }

    /// Fails unless the map was built for exactly these profiles.
    pub fn check_profiles(&self, model: &ModelProfile, gpu: &GpuProfile) -> Result<()> {
        let expected = profile_hash(model, gpu);
        if expected != self.profile_hash {
            return Err(Error::ProfileMismatch {
                expected,
                found: self.profile_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let _ = writeln!(s, "# offloading-map v1");
        let _ = writeln!(s, "profile_hash = {}", self.profile_hash);
        let _ = writeln!(s, "training_mode = {}", self.training_mode);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "cached_step = {}", g.cached_step);
        let _ = writeln!(s, "incoming_step = {}", g.incoming_step);
        let _ = writeln!(s, "batch_step = {}", g.batch_step);
        let _ = writeln!(s, "max_cached = {}", g.max_cached);
        let _ = writeln!(s, "max_incoming = {}", g.max_incoming);
        let _ = writeln!(s, "max_batch = {}", g.max_batch);
        let _ = writeln!(s, "cached,incoming,batch,decision");
        for (c, i, b, d) in self.cells() {
            let _ = writeln!(s, "{c},{i},{b},{}", d.encode());
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let (mut header, body, body_start) = split_map_text(text, origin, "# offloading-map v1", "cached,incoming,batch,decision")?;
        let grid = GridSpec {
            cached_step: header.take("cached_step")?,
            incoming_step: header.take("incoming_step")?,
            batch_step: header.take("batch_step")?,
            max_cached: header.take("max_cached")?,
            max_incoming: header.take("max_incoming")?,
            max_batch: header.take("max_batch")?,
        };
        let mode: TrainingMode = header.take("training_mode")?;
        let num_layers: u32 = header.take("num_layers")?;
        let hash: String = header.take("profile_hash")?;
        header.finish()?;
        grid.validate()?;

        let mut map = OffloadingMap {
            grid,
            training_mode: mode,
            num_layers,
            profile_hash: hash,
            cells: Vec::new(),
        };
        let expected: Vec<(u64, u64, u64)> = {
            let total = grid.cached_buckets() * grid.incoming_buckets() * grid.batch_buckets();
            map.cells = vec![OffloadDecision::NoAction; total];
            map.cells().map(|(c, i, b, _)| (c, i, b)).collect()
        };
        let mut count = 0;
        for (off, line) in body.iter().enumerate() {
            let lineno = body_start + off;
            let bad = |reason: String| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                reason,
            };
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", parts.len())));
            }
            let coords: Vec<u64> = parts[..3]
                .iter()
                .map(|p| p.parse::<u64>().map_err(|_| bad(format!("bad number `{p}`"))))
                .collect::<Result<_>>()?;
            let want = expected.get(count).ok_or_else(|| bad("more cells than the grid holds".into()))?;
            if (coords[0], coords[1], coords[2]) != *want {
                return Err(bad(format!("cell out of order; expected {want:?}")));
            }
            let d = OffloadDecision::decode(parts[3]).ok_or_else(|| bad(format!("bad decision `{}`", parts[3])))?;
            if let OffloadDecision::FreeLayers(n) = d {
                if n == 0 || n > num_layers {
                    return Err(bad(format!("free count {n} outside 1..={num_layers}")));
                }
            }
            map.cells[count] = d;
            count += 1;
        }
        if count != expected.len() {
            return Err(Error::invalid(origin, format!("expected {} cells, found {count}", expected.len())));
        }
        Ok(map)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// (cached tokens, freed layers) → load back or recompute.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgingMap {
    pub cached_step: u64,
    pub max_cached: u64,
    pub training_mode: TrainingMode,
    pub num_layers: u32,
    pub output_tokens: u64,
    pub profile_hash: String,
    /// Row-major: `cached_bucket * (num_layers + 1) + freed`.
    cells: Vec<HedgeDecision>,
}

/// Timing comparison behind one hedging-map cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedgeCost {
    /// Host-to-device time for the freed layers.
    pub raw_load: f64,
    /// Backward time of the retained layers, which hides loading.
    pub overlap: f64,
    pub recompute: f64,
}

impl HedgeCost {
    pub fn compute(
        model: &ModelProfile,
        gpu: &GpuProfile,
        mode: TrainingMode,
        output_tokens: u64,
        cached: u64,
        freed: u32,
    ) -> Result<Self> {
        if cached == 0 {
            return Ok(HedgeCost {
                raw_load: 0.0,
                overlap: 0.0,
                recompute: 0.0,
            });
        }
        let bytes = model.activation_bytes(cached, freed)?;
        let retained = (model.num_layers - freed) as f64;
        Ok(HedgeCost {
            raw_load: gpu.transfer_time(bytes, crate::cost::Direction::HostToDevice),
            overlap: retained * model.backward_layer_latency(cached)?,
            recompute: model.recompute_time(mode, cached, output_tokens)?,
        })
    }

    pub fn residual_load(&self) -> f64 {
        (self.raw_load - self.overlap).max(0.0)
    }

    pub fn decide(&self) -> HedgeDecision {
        if self.residual_load() > self.recompute {
            HedgeDecision::Recompute
        } else {
            HedgeDecision::LoadBack
        }
    }
}

impl HedgingMap {
    pub fn build(
        model: &ModelProfile,
        gpu: &GpuProfile,
        cached_step: u64,
        max_cached: u64,
        mode: TrainingMode,
        output_tokens: u64,
    ) -> Result<Self> {
        if cached_step == 0 || max_cached == 0 {
            return Err(Error::invalid("cached axis", "step and bound must be positive"));
        }
        if !max_cached.is_multiple_of(cached_step) {
            return Err(Error::invalid(
                "cached axis",
                format!("bound {max_cached} is not a multiple of step {cached_step}"),
            ));
        }
        validate_pair(model, gpu)?;
        let l = model.num_layers;
        let mut cells = Vec::new();
        for ci in 0..=(max_cached / cached_step) {
            let cached = ci * cached_step;
            for freed in 0..=l {
                let d = if freed == 0 {
                    HedgeDecision::LoadBack
                } else {
                    HedgeCost::compute(model, gpu, mode, output_tokens, cached, freed)?.decide()
                };
                cells.push(d);
            }
        }
        Ok(HedgingMap {
            cached_step,
            max_cached,
            training_mode: mode,
            num_layers: l,
            output_tokens,
            profile_hash: profile_hash(model, gpu),
            cells,
        })
    }

    /// Checked lookup: cached tokens round up, freed layers are exact.
    pub fn try_lookup(&self, cached: u64, freed: u32) -> Result<HedgeDecision> {
        if freed == 0 {
            return Ok(HedgeDecision::LoadBack);
        }
        let ci = round_up_index("cached", cached, self.cached_step, self.max_cached)?;
        if freed > self.num_layers {
            return Err(Error::OutOfRange {
                axis: "freed",
                value: freed as u64,
                bound: self.num_layers as u64,
            });
        }
        Ok(self.cells[ci * (self.num_layers as usize + 1) + freed as usize])
    }

    /// Out-of-range inputs fall back to recompute.
    pub fn lookup(&self, cached: u64, freed: u32) -> HedgeDecision {
        match self.try_lookup(cached, freed) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("hedging lookup fell back to recompute: {e}");
                HedgeDecision::Recompute
            }
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = (u64, u32, HedgeDecision)> + '_ {
        let per_row = self.num_layers as usize + 1;
        self.cells
            .iter()
            .enumerate()
            .map(move |(k, d)| ((k / per_row) as u64 * self.cached_step, (k % per_row) as u32, *d))
    }

    pub fn check_profiles(&self, model: &ModelProfile, gpu: &GpuProfile) -> Result<()> {
        let expected = profile_hash(model, gpu);
        if expected != self.profile_hash {
            return Err(Error::ProfileMismatch {
                expected,
                found: self.profile_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# hedging-map v1");
        let _ = writeln!(s, "profile_hash = {}", self.profile_hash);
        let _ = writeln!(s, "training_mode = {}", self.training_mode);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "output_tokens = {}", self.output_tokens);
        let _ = writeln!(s, "cached_step = {}", self.cached_step);
        let _ = writeln!(s, "max_cached = {}", self.max_cached);
        let _ = writeln!(s, "cached,freed,decision");
        for (c, f, d) in self.cells() {
            let tag = match d {
                HedgeDecision::LoadBack => "load",
                HedgeDecision::Recompute => "recompute",
            };
            let _ = writeln!(s, "{c},{f},{tag}");
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let (mut header, body, body_start) = split_map_text(text, origin, "# hedging-map v1", "cached,freed,decision")?;
        let cached_step: u64 = header.take("cached_step")?;
        let max_cached: u64 = header.take("max_cached")?;
        let training_mode: TrainingMode = header.take("training_mode")?;
        let num_layers: u32 = header.take("num_layers")?;
        let output_tokens: u64 = header.take("output_tokens")?;
        let profile_hash: String = header.take("profile_hash")?;
        header.finish()?;
        if cached_step == 0 || !max_cached.is_multiple_of(cached_step) {
            return Err(Error::invalid("cached axis", "bound must be a positive multiple of step"));
        }
        let per_row = num_layers as usize + 1;
        let total = (max_cached / cached_step + 1) as usize * per_row;
        let mut cells = Vec::with_capacity(total);
        for (off, line) in body.iter().enumerate() {
            let lineno = body_start + off;
            let bad = |reason: String| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                reason,
            };
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", parts.len())));
            }
            let k = cells.len();
            let want = ((k / per_row) as u64 * cached_step, (k % per_row) as u32);
            let got = (
                parts[0].parse::<u64>().map_err(|_| bad(format!("bad number `{}`", parts[0])))?,
                parts[1].parse::<u32>().map_err(|_| bad(format!("bad number `{}`", parts[1])))?,
            );
            if got != want || k >= total {
                return Err(bad(format!("cell out of order; expected {want:?}")));
            }
            cells.push(match parts[2] {
                "load" => HedgeDecision::LoadBack,
                "recompute" => HedgeDecision::Recompute,
                other => return Err(bad(format!("bad decision `{other}`"))),
            });
        }
        if cells.len() != total {
            return Err(Error::invalid(origin, format!("expected {total} cells, found {}", cells.len())));
        }
        Ok(HedgingMap {
            cached_step,
            max_cached,
            training_mode,
            num_layers,
            output_tokens,
            profile_hash,
            cells,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Splits a map file into its `key = value` header and cell lines.
fn split_map_text<'a>(
    text: &'a str,
    origin: &str,
    magic: &str,
    columns: &str,
) -> Result<(crate::cost::KeyValues, Vec<&'a str>, usize)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == magic => {}
        _ => {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 1,
                reason: format!("expected `{magic}`"),
            })
        }
    }
    let mut header = String::new();
    let mut body_start = None;
    for (idx, line) in lines.by_ref() {
        if line.trim() == columns {
            body_start = Some(idx + 2);
            break;
        }
        header.push_str(line);
        header.push('\n');
    }
    let body_start = body_start.ok_or_else(|| Error::invalid(origin, format!("missing `{columns}` line")))?;
    let body: Vec<&str> = lines.map(|(_, l)| l).filter(|l| !l.trim().is_empty()).collect();
    Ok((crate::cost::KeyValues::parse(&header, origin)?, body, body_start))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> (ModelProfile, GpuProfile) {
        (ModelProfile::llama_8b(), GpuProfile::a100_80g())
    }

    #[test]
    fn round_up_examples() {
        assert_eq!(round_up_index("incoming", 420, 500, 8000).unwrap(), 1);
        assert_eq!(round_up_index("batch", 6, 5, 50).unwrap(), 2);
        assert_eq!(round_up_index("cached", 1000, 500, 8000).unwrap(), 2);
        assert_eq!(round_up_index("cached", 0, 500, 8000).unwrap(), 0);
        assert!(round_up_index("cached", 8001, 500, 8000).is_err());
    }

    #[test]
    fn cpa_cells_match_hand_budget() {
        let (m, g) = defaults();
        let map = OffloadingMap::build(&m, &g, GridSpec::default(), TrainingMode::Cpa).unwrap();
        // Independent arithmetic: avail = 80 GiB - 18 GiB; cached = 4000 tokens.
        let avail: f64 = 85_899_345_920.0 - 17_179_869_184.0 - 2_147_483_648.0;
        let acts = 4000.0 * 32.0 * 417_000.0;
        let kv = 4000.0 * 524_288.0;
        let headroom = avail - acts - kv;
        assert!((headroom - 11.099e9).abs() < 1e7, "{headroom}");

        let small = 2.0 * 500.0 * 5.0 * 524_288.0;
        assert!(small <= headroom);
        assert_eq!(map.lookup(4000, 500, 5).unwrap(), OffloadDecision::NoAction);

        let big = 2.0 * 2000.0 * 10.0 * 524_288.0;
        let n = ((big - headroom) / (4000.0 * 417_000.0)).ceil() as u32;
        assert_eq!(n, 6);
        assert_eq!(map.lookup(4000, 2000, 10).unwrap(), OffloadDecision::FreeLayers(6));
    }

    #[test]
    fn empty_cache_never_frees() {
        let (m, g) = defaults();
        let map = OffloadingMap::build(&m, &g, GridSpec::default(), TrainingMode::Cpt).unwrap();
        let avail = g.capacity_bytes - static_bytes(&m, &g);
        for (c, i, b, d) in map.cells().filter(|(c, ..)| *c == 0) {
            let fits = m.serving_memory(i, b).unwrap() <= avail;
            assert_eq!(d == OffloadDecision::NoAction, fits, "({c},{i},{b})");
        }
    }

    #[test]
    fn lookup_rounds_up_and_rejects_out_of_range() {
        let (m, g) = defaults();
        let map = OffloadingMap::build(&m, &g, GridSpec::default(), TrainingMode::Cpa).unwrap();
        assert_eq!(map.lookup(3600, 420, 6).unwrap(), map.lookup(4000, 500, 10).unwrap());
        assert!(matches!(map.lookup(8001, 500, 5), Err(Error::OutOfRange { axis: "cached", .. })));
        assert!(matches!(map.lookup(100, 8500, 5), Err(Error::OutOfRange { axis: "incoming", .. })));
        assert!(matches!(map.lookup(100, 500, 51), Err(Error::OutOfRange { axis: "batch", .. })));
    }

    #[test]
    fn hedge_examples() {
        let (m, g) = defaults();
        let all = HedgeCost::compute(&m, &g, TrainingMode::Cpa, 128, 4000, 32).unwrap();
        assert!((all.raw_load - 2.224).abs() < 0.001, "{}", all.raw_load);
        assert_eq!(all.overlap, 0.0);
        // Two 128-token responses over a 3744-token shared prompt.
        let oracle = 2.0 * (1e-4 * 128.0 + 2e-8 * (3872.0f64.powi(2) - 3744.0f64.powi(2)));
        assert!((all.recompute - oracle).abs() < 1e-12);
        assert_eq!(all.decide(), HedgeDecision::Recompute);

        let one = HedgeCost::compute(&m, &g, TrainingMode::Cpa, 128, 4000, 1).unwrap();
        assert!((one.raw_load - 0.0695).abs() < 1e-4);
        assert_eq!(one.residual_load(), 0.0);
        assert_eq!(one.decide(), HedgeDecision::LoadBack);

        let map = HedgingMap::build(&m, &g, 500, 8000, TrainingMode::Cpa, 128).unwrap();
        assert_eq!(map.lookup(4000, 0), HedgeDecision::LoadBack);
        assert_eq!(map.lookup(4200, 20), map.lookup(4500, 20));
        assert_eq!(map.lookup(9000, 3), HedgeDecision::Recompute);
    }

    #[test]
    fn map_text_roundtrip() {
        let (m, g) = defaults();
        let grid = GridSpec {
            cached_step: 1000,
            incoming_step: 1000,
            batch_step: 10,
            max_cached: 4000,
            max_incoming: 4000,
            max_batch: 20,
        };
        let map = OffloadingMap::build(&m, &g, grid, TrainingMode::Cpa).unwrap();
        assert_eq!(OffloadingMap::parse(&map.to_text(), "t").unwrap(), map);
        let hedge = HedgingMap::build(&m, &g, 1000, 4000, TrainingMode::Cpt, 128).unwrap();
        assert_eq!(HedgingMap::parse(&hedge.to_text(), "t").unwrap(), hedge);
    }

    #[test]
    fn stale_map_is_refused() {
        let (m, g) = defaults();
        let map = OffloadingMap::build(&m, &g, GridSpec::default(), TrainingMode::Cpt).unwrap();
        let mut other = m.clone();
        other.weights_bytes += 1;
        assert!(matches!(map.check_profiles(&other, &g), Err(Error::ProfileMismatch { .. })));
        assert!(map.check_profiles(&m, &g).is_ok());
    }

    #[test]
    fn bad_grid_names_axis() {
        let (m, g) = defaults();
        let grid = GridSpec {
            max_batch: 52,
            ..GridSpec::default()
        };
        let err = OffloadingMap::build(&m, &g, grid, TrainingMode::Cpt).unwrap_err().to_string();
        assert!(err.contains("batch"), "{err}");
    }
}
