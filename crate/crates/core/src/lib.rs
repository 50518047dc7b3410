//! Discrete-event simulator for co-locating online continual training with
//! LLM serving on one GPU.
//!
//! Serving prefills record their activations so a later training step can
//! reuse them instead of recomputing the forward pass. Training runs one layer
//! at a time in serving idle gaps and yields at layer boundaries. When a
//! serving batch needs memory, precomputed maps decide how many cached layers
//! to push to host and whether to load them back or recompute them.
//!
//! Modules:
//! - [`cost`]: closed-form latency and memory model
//! - [`workload`]: trace generation and loading
//! - [`profiler`]: offloading and hedging maps
//! - [`memory`]: device ledger, activation store, prefetch planning
//! - [`engine`]: the event-driven simulator
//! - [`metrics`]: reports, comparison, export
//! - [`experiments`]: sweeps shared by the CLI and tests

pub mod cost;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod memory;
pub mod metrics;
pub mod profiler;
pub mod workload;

pub use cost::{Direction, GpuProfile, ModelProfile, TrainingMode};
pub use engine::{run, EventLog, RunOutput, SimConfig, SimMode};
pub use error::{Error, Result};
pub use memory::{ActivationStore, MemoryLedger, PrefetchSchedule, Residency};
pub use metrics::{compare, ComparisonSummary, MetricsReport};
pub use profiler::{GridSpec, HedgeDecision, HedgingMap, OffloadDecision, OffloadingMap};
pub use workload::{generate_trace, load_trace, LabelDelay, LengthDistribution, QueryRecord, Trace, TraceSpec};
