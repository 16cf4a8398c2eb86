use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use diffmath::{Real, Tensor};
use holosim::{ClipLibrary, Env, EnvConfig, ObsLayout};

use super::adamw::AdamW;
use super::config::PpoConfig;
use super::ppo::{update, LossReport, Mode};
use super::rollout::Collector;
use crate::kvruntime::{step, KvCache};
use crate::policy::{gaussian, Checkpoint, InterfaceDims, ModelConfig, PolicyModel};
use crate::{Error, Result};

/// Fixed episodes replayed with the stochastic policy to track progress
/// with less variance than rollout returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    /// `(clip, start frame)` pairs.
    pub episodes: Vec<(usize, usize)>,
    pub seed: u64,
    /// Probe every this many iterations (and always at the first).
    pub every: usize,
}

impl ProbeSpec {
    /// `n` episodes starting at frame 0 of clips `0, 1, ...` modulo the
    /// library size.
    pub fn first_frames(lib: &ClipLibrary, n: usize, seed: u64, every: usize) -> Self {
        Self {
            episodes: (0..n).map(|i| (i % lib.len(), 0)).collect(),
            seed,
            every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub env_steps: usize,
    /// Mean reward per valid step.
    pub step_reward: f64,
    /// Mean return of episodes that ended during this iteration.
    pub episode_reward: Option<f64>,
    pub episodes: usize,
    /// Episode count per termination reason.
    pub terminations: BTreeMap<String, usize>,
    /// Probe return of the policy that collected this iteration.
    pub probe_return: Option<f64>,
    pub losses: LossReport,
    pub utilization: Vec<Vec<usize>>,
    pub term_means: Vec<(String, f64)>,
    pub env_errors: Vec<String>,
}

/// Wall-clock figures, kept apart from the reproducible record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationTiming {
    pub iteration: usize,
    pub collect_s: f64,
    pub update_s: f64,
    pub steps_per_s: f64,
}

/// Interface widths for a given environment configuration.
pub fn interface_for(env: &EnvConfig) -> InterfaceDims {
    InterfaceDims::from_layout(&ObsLayout::new(&env.robot, env.lookahead, &env.noise))
}

/// Mean undiscounted return of the probe episodes.
pub fn probe_return<T: Real>(model: &PolicyModel<T>, env: Arc<EnvConfig>, lib: Arc<ClipLibrary>, spec: &ProbeSpec) -> Result<f64> {
    let mut total = 0.0;
    for (k, &(clip, start)) in spec.episodes.iter().enumerate() {
        let seed = spec.seed.wrapping_add(k as u64);
        let mut e = Env::new(env.clone(), lib.clone(), seed)?;
        e.reset_to(clip, start)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9b0e);
        let mut cache = KvCache::new(model.config());
        loop {
            let x = model.normalize_obs(&e.observation().actor);
            let out = step(model, &mut cache, &x)?;
            let a = gaussian::sample(&out.mu, &out.log_std, &mut rng);
            let o = e.step(&a)?;
            total += o.reward;
            if o.termination.is_some() {
                break;
            }
        }
    }
    Ok(total / spec.episodes.len().max(1) as f64)
}

pub struct Trainer<T: Real> {
    pub model: PolicyModel<T>,
    pub opt: AdamW,
    pub ppo: PpoConfig,
    pub env: Arc<EnvConfig>,
    pub lib: Arc<ClipLibrary>,
    pub probe: Option<ProbeSpec>,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: usize,
    collector: Collector<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, ppo: PpoConfig, env: EnvConfig, lib: Arc<ClipLibrary>, seed: u64) -> Result<Self> {
        let model = PolicyModel::new(model)?;
        Self::from_model(model, ppo, env, lib, seed)
    }

    pub fn from_model(model: PolicyModel<T>, ppo: PpoConfig, env: EnvConfig, lib: Arc<ClipLibrary>, seed: u64) -> Result<Self> {
        ppo.validate()?;
        env.validate()?;
        let dims = interface_for(&env);
        if model.config().dims != dims {
            return Err(Error::Config(format!(
                "model interface {:?} does not match environment {:?}",
                model.config().dims,
                dims
            )));
        }
        let env = Arc::new(env);
        let mut collector = Collector::new(&model, env.clone(), lib.clone(), ppo.num_envs, seed)?;
        collector.set_workers(ppo.workers);
        let opt = AdamW::new(&model.params, ppo.lr, ppo.betas, ppo.adam_eps, ppo.weight_decay);
        Ok(Self {
            model,
            opt,
            ppo,
            env,
            lib,
            probe: None,
            seed,
            iteration: 0,
            env_steps: 0,
            collector,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0bda7e),
        })
    }

    /// One collect → GAE → update cycle.
    pub fn iterate(&mut self) -> Result<(IterationRecord, IterationTiming)> {
        self.iteration += 1;
        let probe = match &self.probe {
            Some(p) if self.iteration == 1 || (p.every > 0 && self.iteration % p.every == 0) => {
                Some(probe_return(&self.model, self.env.clone(), self.lib.clone(), p)?)
            }
            _ => None,
        };
        let t0 = std::time::Instant::now();
        let (batch, stats) = self.collector.collect(&mut self.model, self.ppo.segment_len, true)?;
        let collect_s = t0.elapsed().as_secs_f64();
        if batch.num_valid() == 0 {
            return Err(Error::Config(format!(
                "iteration {} collected no valid steps: {:?}",
                self.iteration, stats.env_errors
            )));
        }
        let t1 = std::time::Instant::now();
        let losses = update(&mut self.model, &mut self.opt, &batch, &self.ppo, &mut self.rng, Mode::Sequence)?;
        let update_s = t1.elapsed().as_secs_f64();
        self.env_steps += stats.steps;
        let episode_reward = if stats.episodes.is_empty() {
            None
        } else {
            Some(stats.episodes.iter().map(|e| e.ret).sum::<f64>() / stats.episodes.len() as f64)
        };
        let mut terminations = BTreeMap::new();
        for e in &stats.episodes {
            *terminations.entry(e.termination.clone()).or_insert(0) += 1;
        }
        let record = IterationRecord {
            iteration: self.iteration,
            env_steps: self.env_steps,
            step_reward: stats.reward_sum / stats.steps.max(1) as f64,
            episode_reward,
            episodes: stats.episodes.len(),
            terminations,
            probe_return: probe,
            losses,
            utilization: stats.utilization,
            term_means: stats.term_means,
            env_errors: stats.env_errors,
        };
        let timing = IterationTiming {
            iteration: self.iteration,
            collect_s,
            update_s,
            steps_per_s: stats.steps as f64 / (collect_s + update_s).max(1e-12),
        };
        Ok((record, timing))
    }

    /// Model, optimizer moments and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for (k, id) in self.model.params.ids().enumerate() {
            let name = self.model.params.name(id);
            let (r, c) = self.model.params.get(id).dims();
            let t = |v: &Vec<f64>| Tensor::matrix(r, c, v.clone()).expect("moment shape");
            ck.push(format!("adam.m/{name}"), t(&self.opt.m[k]));
            ck.push(format!("adam.v/{name}"), t(&self.opt.v[k]));
        }
        ck.meta = serde_json::json!({
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "seed": self.seed,
            "adam_t": self.opt.t,
        });
        ck
    }

    /// Continues from a checkpoint. Environments are reseeded from the
    /// seed and iteration, so a resumed run is reproducible but differs
    /// from an uninterrupted one.
    pub fn resume(ck: &Checkpoint, ppo: PpoConfig, env: EnvConfig, lib: Arc<ClipLibrary>) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")))
        };
        let iteration = meta("iteration")? as usize;
        let seed = meta("seed")?;
        let model = ck.model(None)?;
        let run_seed = seed.wrapping_add(iteration as u64);
        let mut tr = Self::from_model(model, ppo, env, lib, run_seed)?;
        for (k, id) in tr.model.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let name = tr.model.params.name(id).to_string();
            for (key, dst) in [("m", &mut tr.opt.m[k]), ("v", &mut tr.opt.v[k])] {
                let t = ck
                    .get(&format!("adam.{key}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing adam.{key}/{name}")))?;
                if t.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("adam.{key}/{name} has {} values", t.len())));
                }
                dst.copy_from_slice(t.data());
            }
        }
        tr.opt.t = meta("adam_t")?;
        tr.iteration = iteration;
        tr.env_steps = meta("env_steps")? as usize;
        tr.seed = seed;
        Ok(tr)
    }
}
