//! Sequence-level PPO: vectorized rollouts with per-environment KV caches,
//! GAE, one causal pass per segment for all log-probabilities, auxiliary
//! and dead-expert losses, AdamW.

pub mod adamw;
pub mod config;
pub mod gae;
pub mod losses;
pub mod ppo;
pub mod rollout;
pub mod train;

pub use adamw::AdamW;
pub use config::{AuxWeights, PpoConfig};
pub use ppo::{LossReport, Mode};
pub use rollout::{CollectStats, Collector, RolloutBatch};
pub use train::{interface_for, probe_return, IterationRecord, IterationTiming, ProbeSpec, Trainer};
