use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use diffmath::{Real, Tensor};

use crate::kvruntime::{step, window_forward, KvCache};
use crate::policy::PolicyModel;
use crate::trainer::adamw::AdamW;
use crate::trainer::ppo::{advantages, clip_by_network, gradients, Mode};
use crate::trainer::{PpoConfig, RolloutBatch};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Latency {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    /// Multiply-adds recorded by the tape, averaged per step.
    pub flops: f64,
}

impl Latency {
    fn of(mut us: Vec<f64>, flops: f64) -> Self {
        us.sort_by(f64::total_cmp);
        let q = |p: f64| us[((us.len() - 1) as f64 * p).round() as usize];
        Self {
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p50_us: q(0.5),
            p95_us: q(0.95),
            flops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferenceBench {
    pub context: usize,
    pub steps: usize,
    pub cached: Latency,
    pub full: Latency,
    /// Ratio of mean full-window latency to mean cached latency.
    pub speedup: f64,
    /// Largest action-mean gap between the two paths.
    pub max_diff: f64,
}

/// Per-step latency of the cached path against recomputing the last `C`
/// observations from scratch, on one random stream. The first `C` steps
/// only warm the cache.
pub fn bench_inference<T: Real>(model: &PolicyModel<T>, steps: usize, seed: u64) -> Result<InferenceBench> {
    let cfg = model.config();
    let c = cfg.context;
    let d = cfg.dims.obs_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = c + steps;
    let stream: Vec<Vec<T>> = (0..total).map(|_| (0..d).map(|_| T::of(rng.random_range(-2.0..2.0))).collect()).collect();
    let mut cache = KvCache::new(cfg);
    let (mut cached_us, mut full_us) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let (mut cf, mut ff) = (0u64, 0u64);
    let mut max_diff: f64 = 0.0;
    for (t, x) in stream.iter().enumerate() {
        let t0 = Instant::now();
        let out = step(model, &mut cache, x)?;
        let dt_cached = t0.elapsed().as_secs_f64() * 1e6;
        if t < c {
            continue;
        }
        let s = t + 1 - c;
        let win = Tensor::matrix(c, d, stream[s..=t].concat())?;
        let positions: Vec<usize> = (s..=t).collect();
        let t1 = Instant::now();
        let (mu, flops) = window_forward(model, &win, &positions)?;
        full_us.push(t1.elapsed().as_secs_f64() * 1e6);
        cached_us.push(dt_cached);
        cf += out.flops;
        ff += flops;
        for (a, b) in mu.iter().zip(&out.mu) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let n = steps.max(1) as f64;
    let cached = Latency::of(cached_us, cf as f64 / n);
    let full = Latency::of(full_us, ff as f64 / n);
    Ok(InferenceBench {
        context: c,
        steps,
        speedup: full.mean_us / cached.mean_us,
        cached,
        full,
        max_diff,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingBench {
    pub envs: usize,
    pub steps: usize,
    pub context: usize,
    pub sequence_s: f64,
    pub step_level_s: f64,
    /// Transitions per second through one gradient step.
    pub sequence_rate: f64,
    pub step_level_rate: f64,
    pub speedup: f64,
    pub sequence_passes: usize,
    pub step_level_passes: usize,
}

fn timed_update<T: Real>(model: &PolicyModel<T>, batch: &RolloutBatch<T>, cfg: &PpoConfig, mode: Mode, reps: usize) -> Result<(f64, usize)> {
    let (adv, ret) = advantages(batch, cfg);
    let mut m = model.clone();
    let mut opt = AdamW::new(&m.params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut best = f64::INFINITY;
    let mut passes = 0;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let (rep, mut grads) = gradients(&m, batch, &adv, &ret, cfg, mode)?;
        clip_by_network(&m, &mut grads, cfg.max_grad_norm);
        opt.step(&mut m.params, &grads);
        best = best.min(t0.elapsed().as_secs_f64());
        passes = rep.stats.passes;
    }
    Ok((best, passes))
}

/// One full-batch gradient step (all losses, backward, optimizer) on a
/// random `B × T` batch, sequence-level against the step-level oracle.
/// Times are the best of `reps`.
pub fn bench_training<T: Real>(model: &PolicyModel<T>, envs: usize, steps: usize, reps: usize, seed: u64) -> Result<TrainingBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = RolloutBatch::<T>::random(&model.config().dims, envs, steps, &mut rng);
    let cfg = PpoConfig::default();
    let (seq, sp) = timed_update(model, &batch, &cfg, Mode::Sequence, reps)?;
    let (stp, lp) = timed_update(model, &batch, &cfg, Mode::StepLevel, reps)?;
    let n = (envs * steps) as f64;
    Ok(TrainingBench {
        envs,
        steps,
        context: model.config().context,
        sequence_s: seq,
        step_level_s: stp,
        sequence_rate: n / seq,
        step_level_rate: n / stp,
        speedup: stp / seq,
        sequence_passes: sp,
        step_level_passes: lp,
    })
}
