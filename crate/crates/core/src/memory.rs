//! Device memory ledger, layer-tagged activation store, transfer channels and
//! reverse-order prefetch planning.
//!
//! The ledger follows caching-allocator semantics: released bytes become
//! *reserved* rather than returning to the device, and later allocations
//! consume reserved bytes before growing `allocated`.

use serde::{Deserialize, Serialize};

use crate::cost::{Direction, GpuProfile, TrainingMode};
use crate::error::{Error, Result};

/// What a ledger allocation is for; used for per-purpose accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    /// Weights and runtime reserve.
    Static,
    /// KV cache and workspace of a serving batch.
    Serving,
    /// Cached training activations.
    Activation,
    /// KV cache held for a cached training sample.
    Kv,
    /// Activations being loaded back from host.
    Load,
}

impl Purpose {
    const ALL: [Purpose; 5] = [
        Purpose::Static,
        Purpose::Serving,
        Purpose::Activation,
        Purpose::Kv,
        Purpose::Load,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[must_use]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocOutcome {
    Ok,
    WouldOom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLedger {
    capacity: u64,
    allocated: u64,
    reserved: u64,
    peak_allocated: u64,
    live: [u64; 5],
}

impl MemoryLedger {
    pub fn new(capacity: u64) -> Self {
        MemoryLedger {
            capacity,
            allocated: 0,
            reserved: 0,
            peak_allocated: 0,
            live: [0; 5],
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn reserved(&self) -> u64 {
        self.reserved
    }

    pub fn peak_allocated(&self) -> u64 {
        self.peak_allocated
    }

    /// Bytes held by live allocations (allocated minus reusable reserve).
    pub fn in_use(&self) -> u64 {
        self.allocated - self.reserved
    }

    pub fn live_for(&self, purpose: Purpose) -> u64 {
        self.live[purpose.slot()]
    }

    pub fn would_oom(&self, bytes: u64) -> bool {
        self.in_use() as u128 + bytes as u128 > self.capacity as u128
    }

    /// Reuses reserved bytes first; only the remainder grows `allocated`.
    pub fn allocate(&mut self, bytes: u64, purpose: Purpose) -> AllocOutcome {
        if self.would_oom(bytes) {
            return AllocOutcome::WouldOom;
        }
        let reused = bytes.min(self.reserved);
        self.reserved -= reused;
        self.allocated += bytes - reused;
        self.peak_allocated = self.peak_allocated.max(self.allocated);
        self.live[purpose.slot()] += bytes;
        AllocOutcome::Ok
    }

    /// Marks bytes as reserved: reusable, but still counted in `allocated`.
    pub fn release(&mut self, bytes: u64, purpose: Purpose) -> Result<()> {
        let live = &mut self.live[purpose.slot()];
        if bytes > *live {
            return Err(Error::Contract(format!(
                "releasing {bytes} {purpose:?} bytes with only {live} live"
            )));
        }
        *live -= bytes;
        self.reserved += bytes;
        Ok(())
    }

    /// Checks the accounting identities; the engine calls this after every event.
    pub fn check(&self) -> Result<()> {
        let live: u64 = Purpose::ALL.iter().map(|p| self.live[p.slot()]).sum();
        if self.allocated > self.capacity {
            return Err(Error::Contract(format!(
                "allocated {} exceeds capacity {}",
                self.allocated, self.capacity
            )));
        }
        if self.reserved > self.allocated || live != self.allocated - self.reserved {
            return Err(Error::Contract(format!(
                "ledger identity broken: allocated {} reserved {} live {live}",
                self.allocated, self.reserved
            )));
        }
        Ok(())
    }
}

/// One direction of the host link. Transfers are serialized FIFO.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransferChannel {
    free_at: f64,
}

impl TransferChannel {
    pub fn free_at(&self) -> f64 {
        self.free_at
    }

    /// Books `duration` seconds no earlier than `earliest`; returns (start, end).
    pub fn book(&mut self, earliest: f64, duration: f64) -> (f64, f64) {
        let start = earliest.max(self.free_at);
        let end = start + duration;
        self.free_at = end;
        (start, end)
    }

    /// Gives back the channel after an aborted transfer that ends at `end`.
    pub fn cancel_tail(&mut self, now: f64, end: f64) {
        if self.free_at == end {
            self.free_at = now;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Residency {
    DeviceOnly,
    DeviceAndHost,
    HostOnly,
    Dropped,
}

impl Residency {
    pub fn on_device(self) -> bool {
        matches!(self, Residency::DeviceOnly | Residency::DeviceAndHost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamMode {
    /// Keep on device and copy to host in the background.
    Retain,
    /// Copy to host as recorded; nothing stays on device.
    StreamToHost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntry {
    pub layer: u32,
    pub bytes: u64,
    pub residency: Residency,
    /// When the host copy lands, if one was scheduled.
    pub host_copy_done_at: Option<f64>,
    /// Bumped whenever the entry is recreated so stale copy events can be
    /// told apart.
    pub version: u32,
}

/// The single cached training sample: per-layer activations plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub entries: Vec<LayerEntry>,
    pub num_layers: u32,
    pub cached_tokens: u64,
    pub training_mode: TrainingMode,
    pub created_at: f64,
    pub label_ready_at: Option<f64>,
}

/// Result of freeing layers to host.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Freed {
    pub layers: u32,
    pub bytes: u64,
}

impl ActivationStore {
    pub fn new(num_layers: u32, cached_tokens: u64, training_mode: TrainingMode, created_at: f64) -> Self {
        ActivationStore {
            entries: Vec::with_capacity(num_layers as usize),
            num_layers,
            cached_tokens,
            training_mode,
            created_at,
            label_ready_at: None,
        }
    }

    /// Records the next layer during a forward pass. Returns when its host
    /// copy completes.
    #[allow(clippy::too_many_arguments)]
    pub fn record_activation(
        &mut self,
        ledger: &mut MemoryLedger,
        d2h: &mut TransferChannel,
        gpu: &GpuProfile,
        layer: u32,
        bytes: u64,
        now: f64,
        mode: StreamMode,
    ) -> Result<f64> {
        if layer as usize != self.entries.len() || layer >= self.num_layers {
            return Err(Error::Contract(format!(
                "recorded layer {layer} out of order (expected {})",
                self.entries.len()
            )));
        }
        let residency = match mode {
            StreamMode::Retain => {
                if ledger.allocate(bytes, Purpose::Activation) == AllocOutcome::WouldOom {
                    return Err(Error::InvariantBreach {
                        time: now,
                        event: "record_activation".into(),
                        detail: format!("layer {layer} ({bytes} bytes) does not fit"),
                    });
                }
                Residency::DeviceOnly
            }
            StreamMode::StreamToHost => Residency::HostOnly,
        };
        let (_, done) = d2h.book(now, gpu.transfer_time(bytes, Direction::DeviceToHost));
        self.entries.push(LayerEntry {
            layer,
            bytes,
            residency,
            host_copy_done_at: Some(done),
            version: 0,
        });
        Ok(done)
    }

    pub fn entry(&self, layer: u32) -> &LayerEntry {
        &self.entries[layer as usize]
    }

    /// Host copy of `layer` finished. Ignored if the entry changed since.
    pub fn mark_copied(&mut self, layer: u32, version: u32) -> bool {
        let e = &mut self.entries[layer as usize];
        if e.version == version && e.residency == Residency::DeviceOnly {
            e.residency = Residency::DeviceAndHost;
            return true;
        }
        false
    }

    pub fn device_layers(&self) -> u32 {
        self.entries.iter().filter(|e| e.residency.on_device()).count() as u32
    }

    pub fn host_only_layers(&self) -> u32 {
        self.entries.iter().filter(|e| e.residency == Residency::HostOnly).count() as u32
    }

    pub fn device_bytes(&self) -> u64 {
        self.entries.iter().filter(|e| e.residency.on_device()).map(|e| e.bytes).sum()
    }

    /// The `n` lowest device-resident layers.
    fn lowest_device(&self, n: u32) -> impl Iterator<Item = &LayerEntry> {
        self.entries.iter().filter(|e| e.residency.on_device()).take(n as usize)
    }

    /// Latest host-copy completion among the `n` layers that
    /// [`free_layers_forward_order`](Self::free_layers_forward_order) would
    /// free, if any of them is still copying at `now`.
    pub fn copy_stall_until(&self, n: u32, now: f64) -> Option<f64> {
        self.lowest_device(n)
            .filter(|e| e.residency == Residency::DeviceOnly)
            .filter_map(|e| e.host_copy_done_at)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
            .filter(|t| *t > now)
    }

    /// Treat every host copy finished by `now` as complete.
    pub fn complete_copies(&mut self, now: f64) {
        for e in &mut self.entries {
            if e.residency == Residency::DeviceOnly && e.host_copy_done_at.is_some_and(|t| t <= now) {
                e.residency = Residency::DeviceAndHost;
            }
        }
    }

    /// Moves the `n` lowest device-resident layers to host; their buffers
    /// become reserved in the ledger.
    pub fn free_layers_forward_order(&mut self, ledger: &mut MemoryLedger, n: u32) -> Result<Freed> {
        if n > self.device_layers() {
            return Err(Error::Contract(format!(
                "cannot free {n} layers, only {} on device",
                self.device_layers()
            )));
        }
        if let Some(e) = self.lowest_device(n).find(|e| e.residency != Residency::DeviceAndHost) {
            return Err(Error::Contract(format!("layer {} host copy incomplete", e.layer)));
        }
        let mut bytes = 0;
        let targets: Vec<u32> = self.lowest_device(n).map(|e| e.layer).collect();
        for layer in targets {
            let e = &mut self.entries[layer as usize];
            ledger.release(e.bytes, Purpose::Activation)?;
            e.residency = Residency::HostOnly;
            bytes += e.bytes;
        }
        Ok(Freed { layers: n, bytes })
    }

    /// Load of a host-only layer finished; the caller has already allocated
    /// its bytes under [`Purpose::Load`], which are re-tagged here.
    pub fn complete_load(&mut self, ledger: &mut MemoryLedger, layer: u32) -> Result<()> {
        let e = &mut self.entries[layer as usize];
        if e.residency != Residency::HostOnly {
            return Err(Error::Contract(format!("layer {layer} loaded but not host-only")));
        }
        ledger.release(e.bytes, Purpose::Load)?;
        if ledger.allocate(e.bytes, Purpose::Activation) == AllocOutcome::WouldOom {
            return Err(Error::Contract("retagging a load cannot need new bytes".into()));
        }
        e.residency = Residency::DeviceAndHost;
        Ok(())
    }

    /// Drops one layer from device and host (consumed by backward or
    /// discarded for recompute). Returns device bytes released.
    pub fn drop_layer(&mut self, ledger: &mut MemoryLedger, layer: u32) -> Result<u64> {
        let e = &mut self.entries[layer as usize];
        let released = if e.residency.on_device() { e.bytes } else { 0 };
        if released > 0 {
            ledger.release(released, Purpose::Activation)?;
        }
        e.residency = Residency::Dropped;
        e.host_copy_done_at = None;
        Ok(released)
    }

    /// Re-creates a dropped layer on device during recompute; returns the
    /// new version for its copy event.
    pub fn recreate_layer(&mut self, ledger: &mut MemoryLedger, layer: u32, now: f64, copy_done: f64) -> Result<u32> {
        let e = &mut self.entries[layer as usize];
        if e.residency != Residency::Dropped {
            return Err(Error::Contract(format!("layer {layer} recreated while {:?}", e.residency)));
        }
        if ledger.allocate(e.bytes, Purpose::Activation) == AllocOutcome::WouldOom {
            return Err(Error::InvariantBreach {
                time: now,
                event: "recompute".into(),
                detail: format!("layer {layer} ({} bytes) does not fit", e.bytes),
            });
        }
        e.residency = Residency::DeviceOnly;
        e.host_copy_done_at = Some(copy_done);
        e.version += 1;
        Ok(e.version)
    }

    /// Highest host-only layer at or below `cursor`, the next prefetch target.
    pub fn next_prefetch(&self, cursor: u32) -> Option<u32> {
        self.entries
            .iter()
            .take(cursor as usize + 1)
            .rev()
            .find(|e| e.residency == Residency::HostOnly)
            .map(|e| e.layer)
    }

    /// Host-only layers always form a prefix `0..k` of the non-dropped
    /// layers' forward order.
    pub fn check_prefix(&self) -> Result<()> {
        let mut seen_other = false;
        for e in &self.entries {
            match e.residency {
                Residency::HostOnly if seen_other => {
                    return Err(Error::Contract(format!("host-only layer {} above a device layer", e.layer)))
                }
                Residency::HostOnly | Residency::Dropped => {}
                _ => seen_other = true,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedLoad {
    pub layer: u32,
    pub load_start: f64,
    pub load_done: f64,
    /// When backward reaches this layer, before waiting.
    pub reach: f64,
    pub wait: f64,
}

/// Reverse-order prefetch of host-only layers overlapped with backward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchSchedule {
    /// In channel order: descending layer index.
    pub loads: Vec<PlannedLoad>,
    pub total_wait: f64,
}

/// Plans loads of layers `0..k` on one channel starting at `backward_start`
/// while backward walks layers `num_layers-1..0`.
pub fn plan_prefetch_raw(
    num_layers: u32,
    k: u32,
    per_layer_load: f64,
    backward_start: f64,
    per_layer_backward: f64,
) -> PrefetchSchedule {
    let k = k.min(num_layers);
    let mut channel = TransferChannel { free_at: backward_start };
    let mut done = vec![0.0; k as usize];
    let mut loads = Vec::with_capacity(k as usize);
    for layer in (0..k).rev() {
        let (start, end) = channel.book(backward_start, per_layer_load);
        done[layer as usize] = end;
        loads.push(PlannedLoad {
            layer,
            load_start: start,
            load_done: end,
            reach: 0.0,
            wait: 0.0,
        });
    }
    let mut clock = backward_start;
    let mut total_wait = 0.0;
    for layer in (0..num_layers).rev() {
        if layer < k {
            let wait = (done[layer as usize] - clock).max(0.0);
            let planned = &mut loads[(k - 1 - layer) as usize];
            planned.reach = clock;
            planned.wait = wait;
            total_wait += wait;
            clock += wait;
        }
        clock += per_layer_backward;
    }
    PrefetchSchedule { loads, total_wait }
}

/// [`plan_prefetch_raw`] for the host-only prefix of `store`.
pub fn plan_prefetch(
    store: &ActivationStore,
    gpu: &GpuProfile,
    backward_start: f64,
    per_layer_backward: f64,
) -> PrefetchSchedule {
    let k = store.host_only_layers();
    let per_layer_bytes = store.entries.first().map_or(0, |e| e.bytes);
    let load = gpu.transfer_time(per_layer_bytes, Direction::HostToDevice);
    plan_prefetch_raw(store.num_layers, k, load, backward_start, per_layer_backward)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_examples() {
        let mut l = MemoryLedger::new(80);
        assert_eq!(l.allocate(70, Purpose::Serving), AllocOutcome::Ok);
        l.release(5, Purpose::Serving).unwrap();
        assert_eq!((l.allocated(), l.reserved()), (70, 5));
        // Request 12: 5 reused, 7 fresh.
        assert_eq!(l.allocate(12, Purpose::Activation), AllocOutcome::Ok);
        assert_eq!((l.allocated(), l.reserved(), l.in_use()), (77, 0, 77));

        let mut full = MemoryLedger::new(80);
        assert_eq!(full.allocate(79, Purpose::Static), AllocOutcome::Ok);
        let before = full.clone();
        assert_eq!(full.allocate(2, Purpose::Serving), AllocOutcome::WouldOom);
        assert_eq!(full, before);
        assert_eq!(full.allocate(0, Purpose::Serving), AllocOutcome::Ok);
        assert_eq!(full, before);
        full.check().unwrap();
    }

    #[test]
    fn release_more_than_live_is_a_contract_error() {
        let mut l = MemoryLedger::new(10);
        assert_eq!(l.allocate(4, Purpose::Kv), AllocOutcome::Ok);
        assert!(l.release(5, Purpose::Kv).is_err());
    }

    fn recorded_store(layers: u32, bytes: u64, gpu: &GpuProfile, ledger: &mut MemoryLedger) -> (ActivationStore, Vec<f64>) {
        let mut store = ActivationStore::new(layers, 4000, TrainingMode::Cpt, 0.0);
        let mut d2h = TransferChannel::default();
        let mut done = Vec::new();
        for l in 0..layers {
            done.push(
                store
                    .record_activation(ledger, &mut d2h, gpu, l, bytes, 0.0, StreamMode::Retain)
                    .unwrap(),
            );
        }
        (store, done)
    }

    #[test]
    fn retain_recording_allocates_and_serializes_copies() {
        let gpu = GpuProfile::a100_80g();
        let mut ledger = MemoryLedger::new(gpu.capacity_bytes);
        let per_layer = 4000 * 417_000;
        let (store, done) = recorded_store(32, per_layer, &gpu, &mut ledger);
        assert_eq!(ledger.in_use(), 32 * per_layer);
        assert!(done.windows(2).all(|w| w[0] < w[1]));
        assert!((done[31] - 2.224).abs() < 1e-3, "{}", done[31]);
        assert_eq!(store.device_layers(), 32);
    }

    #[test]
    fn stream_to_host_keeps_device_untouched() {
        let gpu = GpuProfile::a100_80g();
        let mut ledger = MemoryLedger::new(gpu.capacity_bytes);
        let mut store = ActivationStore::new(4, 100, TrainingMode::Cpa, 0.0);
        let mut d2h = TransferChannel::default();
        for l in 0..4 {
            store
                .record_activation(&mut ledger, &mut d2h, &gpu, l, 1000, 0.0, StreamMode::StreamToHost)
                .unwrap();
            assert_eq!(ledger.in_use(), 0);
        }
        assert_eq!(store.host_only_layers(), 4);
        let err = store
            .record_activation(&mut ledger, &mut d2h, &gpu, 2, 1000, 0.0, StreamMode::Retain)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn forward_order_free_and_reserved_reuse() {
        let gpu = GpuProfile::a100_80g();
        let mut ledger = MemoryLedger::new(gpu.capacity_bytes);
        let (mut store, done) = recorded_store(32, 1_000_000, &gpu, &mut ledger);
        assert_eq!(store.copy_stall_until(8, 0.0), Some(done[7]));
        assert!(store.free_layers_forward_order(&mut ledger, 8).is_err());
        store.complete_copies(done[31]);
        assert_eq!(store.copy_stall_until(8, done[31]), None);

        let freed = store.free_layers_forward_order(&mut ledger, 8).unwrap();
        assert_eq!(freed.bytes, 8_000_000);
        for e in &store.entries {
            let expect = if e.layer < 8 { Residency::HostOnly } else { Residency::DeviceAndHost };
            assert_eq!(e.residency, expect);
        }
        store.check_prefix().unwrap();

        let before = ledger.allocated();
        let rest = store.free_layers_forward_order(&mut ledger, 24).unwrap();
        assert_eq!(ledger.allocate(rest.bytes + freed.bytes, Purpose::Serving), AllocOutcome::Ok);
        assert_eq!(ledger.allocated(), before);
        assert_eq!(store.free_layers_forward_order(&mut ledger, 0).unwrap().layers, 0);
    }

    #[test]
    fn prefetch_examples() {
        let m = crate::cost::ModelProfile::llama_8b();
        let gpu = GpuProfile::a100_80g();
        let load = gpu.transfer_time(m.layer_activation_bytes(4000), Direction::HostToDevice);
        let bwd = m.backward_layer_latency(1000).unwrap();
        let one = plan_prefetch_raw(32, 1, load, 0.0, bwd);
        assert_eq!(one.total_wait, 0.0);
        assert_eq!(one.loads.len(), 1);

        let none = plan_prefetch_raw(32, 0, load, 0.0, bwd);
        assert!(none.loads.is_empty());
        assert_eq!(none.total_wait, 0.0);

        // Integer-valued case: load 3, backward 1, all 4 layers freed.
        let all = plan_prefetch_raw(4, 4, 3.0, 0.0, 1.0);
        assert_eq!(all.total_wait, 12.0 - 3.0);
        let layers: Vec<u32> = all.loads.iter().map(|p| p.layer).collect();
        assert_eq!(layers, vec![3, 2, 1, 0]);
        assert!(all.loads.windows(2).all(|w| w[0].load_done <= w[1].load_start));
    }
}
