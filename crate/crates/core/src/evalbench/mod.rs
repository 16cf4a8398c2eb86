//! Tracking metrics, per-source and macro-averaged reports, and timing
//! harnesses for cached inference and sequence-level updates.

pub mod bench;
pub mod metrics;

pub use bench::{bench_inference, bench_training, InferenceBench, Latency, TrainingBench};
pub use metrics::{clip_metrics, eval_clip, eval_suite, ClipMetrics, EvalReport, FrameSample, Summary};
