use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use diffmath::{Real, Tensor};
use holosim::reward::TERM_NAMES;
use holosim::{ClipLibrary, EnvConfig, VecEnv};

use crate::kvruntime::{step_batch, KvCache};
use crate::policy::{gaussian, InterfaceDims, PolicyModel, SeqInput};
use crate::Result;

/// `B × T` transitions, row `b·T + t`, one contiguous segment per env.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch<T> {
    pub envs: usize,
    pub steps: usize,
    /// Normalized noisy actor observations as seen by the behavior policy.
    pub obs: Tensor<T>,
    /// Normalized clean ⊕ privileged critic inputs.
    pub critic_obs: Tensor<T>,
    /// Episode-local positions, restarting at each segment and episode.
    pub positions: Vec<usize>,
    pub actions: Tensor<T>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub valid: Vec<bool>,
    /// Value of the observation following each segment.
    pub bootstrap: Vec<f64>,
    pub base_vel: Tensor<T>,
    pub contacts: Tensor<T>,
    pub ref_pos: Tensor<T>,
    pub robot_pos: Tensor<T>,
}

fn take_rows<T: Real>(t: &Tensor<T>, segs: &[usize], steps: usize) -> Tensor<T> {
    let c = t.cols();
    let mut data = Vec::with_capacity(segs.len() * steps * c);
    for &s in segs {
        data.extend_from_slice(&t.data()[s * steps * c..(s + 1) * steps * c]);
    }
    Tensor::matrix(segs.len() * steps, c, data).expect("segment rows")
}

fn take<X: Clone>(v: &[X], segs: &[usize], steps: usize) -> Vec<X> {
    segs.iter().flat_map(|&s| v[s * steps..(s + 1) * steps].iter().cloned()).collect()
}

impl<T: Real> RolloutBatch<T> {
    pub fn len(&self) -> usize {
        self.envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn seq_input(&self) -> SeqInput<T> {
        SeqInput {
            obs: self.obs.clone(),
            positions: self.positions.clone(),
            seg_len: self.steps,
        }
    }

    /// Sub-batch holding the given segments in order.
    pub fn select(&self, segs: &[usize]) -> Self {
        let t = self.steps;
        Self {
            envs: segs.len(),
            steps: t,
            obs: take_rows(&self.obs, segs, t),
            critic_obs: take_rows(&self.critic_obs, segs, t),
            positions: take(&self.positions, segs, t),
            actions: take_rows(&self.actions, segs, t),
            old_log_probs: take(&self.old_log_probs, segs, t),
            rewards: take(&self.rewards, segs, t),
            values: take(&self.values, segs, t),
            dones: take(&self.dones, segs, t),
            valid: take(&self.valid, segs, t),
            bootstrap: segs.iter().map(|&s| self.bootstrap[s]).collect(),
            base_vel: take_rows(&self.base_vel, segs, t),
            contacts: take_rows(&self.contacts, segs, t),
            ref_pos: take_rows(&self.ref_pos, segs, t),
            robot_pos: take_rows(&self.robot_pos, segs, t),
        }
    }

    /// Appends `extra` segments of zeros marked invalid.
    pub fn padded(&self, extra: usize) -> Self {
        let t = self.steps;
        let n = extra * t;
        let grow = |x: &Tensor<T>| {
            let mut d = x.data().to_vec();
            d.extend(std::iter::repeat_n(T::zero(), n * x.cols()));
            Tensor::matrix(x.rows() + n, x.cols(), d).expect("padded rows")
        };
        let ext = |v: &[f64]| {
            let mut v = v.to_vec();
            v.extend(std::iter::repeat_n(0.0, n));
            v
        };
        let mut positions = self.positions.clone();
        positions.extend((0..extra).flat_map(|_| 0..t));
        let mut valid = self.valid.clone();
        valid.extend(std::iter::repeat_n(false, n));
        let mut dones = self.dones.clone();
        dones.extend(std::iter::repeat_n(false, n));
        let mut bootstrap = self.bootstrap.clone();
        bootstrap.extend(std::iter::repeat_n(0.0, extra));
        Self {
            envs: self.envs + extra,
            steps: t,
            obs: grow(&self.obs),
            critic_obs: grow(&self.critic_obs),
            positions,
            actions: grow(&self.actions),
            old_log_probs: ext(&self.old_log_probs),
            rewards: ext(&self.rewards),
            values: ext(&self.values),
            dones,
            valid,
            bootstrap,
            base_vel: grow(&self.base_vel),
            contacts: grow(&self.contacts),
            ref_pos: grow(&self.ref_pos),
            robot_pos: grow(&self.robot_pos),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub env: usize,
    pub ret: f64,
    pub len: usize,
    pub termination: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CollectStats {
    pub steps: usize,
    pub reward_sum: f64,
    /// Mean of each reward term over valid steps, in term order.
    pub term_means: Vec<(String, f64)>,
    pub episodes: Vec<EpisodeSummary>,
    /// Routed tokens per expert, per layer.
    pub utilization: Vec<Vec<usize>>,
    pub env_errors: Vec<String>,
}

/// Vectorized environments with one KV cache each.
pub struct Collector<T: Real> {
    pub envs: VecEnv,
    caches: Vec<KvCache<T>>,
    returns: Vec<f64>,
    lengths: Vec<usize>,
    failed: Vec<bool>,
    rng: ChaCha8Rng,
}

impl<T: Real> Collector<T> {
    pub fn new(model: &PolicyModel<T>, env: Arc<EnvConfig>, lib: Arc<ClipLibrary>, n: usize, seed: u64) -> Result<Self> {
        let envs = VecEnv::new(env, lib, n, seed)?;
        Ok(Self {
            envs,
            caches: (0..n).map(|_| KvCache::new(model.config())).collect(),
            returns: vec![0.0; n],
            lengths: vec![0; n],
            failed: vec![false; n],
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ac70),
        })
    }

    pub fn set_workers(&mut self, w: usize) {
        self.envs.set_workers(w);
    }

    fn restart(&mut self, b: usize) {
        self.returns[b] = 0.0;
        self.lengths[b] = 0;
        self.failed[b] = self.envs.env_mut(b).reset().is_err();
    }

    /// Runs `steps` control steps in every environment. Caches are cleared
    /// at the segment start and whenever an episode ends; `update_stats`
    /// folds each observation into the model's running statistics first.
    pub fn collect(&mut self, model: &mut PolicyModel<T>, steps: usize, update_stats: bool) -> Result<(RolloutBatch<T>, CollectStats)> {
        let cfg = model.config().clone();
        let b_n = self.envs.len();
        let (od, cd, j) = (cfg.dims.obs_dim, cfg.dims.critic_dim, cfg.dims.action_dim);
        let (kc, kp) = (cfg.dims.contact_bodies, cfg.dims.pos_bodies);
        let n = b_n * steps;
        let mut obs = vec![T::zero(); n * od];
        let mut critic = vec![T::zero(); n * cd];
        let mut actions = vec![T::zero(); n * j];
        let mut vel = vec![T::zero(); n * 3];
        let mut contacts = vec![T::zero(); n * kc];
        let mut refp = vec![T::zero(); n * 3 * kp];
        let mut robp = vec![T::zero(); n * 3 * kp];
        let mut positions = vec![0; n];
        let mut logp = vec![0.0; n];
        let mut rewards = vec![0.0; n];
        let mut values = vec![0.0; n];
        let mut dones = vec![false; n];
        let mut valid = vec![false; n];
        let mut stats = CollectStats {
            utilization: vec![vec![0; cfg.experts]; cfg.blocks],
            ..CollectStats::default()
        };
        let mut term_sums = [0.0; 12];

        for b in 0..b_n {
            self.caches[b].clear();
            if self.failed[b] {
                self.restart(b);
            }
        }
        for t in 0..steps {
            if update_stats {
                for b in 0..b_n {
                    if !self.failed[b] {
                        let o = self.envs.env(b).observation();
                        model.obs_norm.update(&o.actor);
                        model.critic_norm.update(&o.critic);
                    }
                }
            }
            let mut step_obs = Vec::with_capacity(b_n);
            let mut crit_rows = Vec::with_capacity(b_n * cd);
            for b in 0..b_n {
                let o = self.envs.env(b).observation();
                let (x, c) = if self.failed[b] {
                    (vec![T::zero(); od], vec![T::zero(); cd])
                } else {
                    (model.normalize_obs(&o.actor), model.normalize_critic(&o.critic))
                };
                let i = b * steps + t;
                obs[i * od..(i + 1) * od].copy_from_slice(&x);
                critic[i * cd..(i + 1) * cd].copy_from_slice(&c);
                crit_rows.extend_from_slice(&c);
                positions[i] = self.caches[b].position();
                step_obs.push(x);
            }
            let v = model.values(&Tensor::matrix(b_n, cd, crit_rows)?)?;
            let outs = step_batch(model, &mut self.caches, &step_obs, 1);
            let mut acts = Vec::with_capacity(b_n);
            for (b, out) in outs.into_iter().enumerate() {
                let i = b * steps + t;
                values[i] = v[b];
                if self.failed[b] {
                    acts.push(vec![0.0; j]);
                    continue;
                }
                let out = out?;
                for (l, d) in out.decisions.iter().enumerate() {
                    for &e in &d.experts {
                        stats.utilization[l][e] += 1;
                    }
                }
                let a: Vec<T> = gaussian::sample(&out.mu, &out.log_std, &mut self.rng).into_iter().map(T::of).collect();
                let a64: Vec<f64> = a.iter().map(|x| x.f64()).collect();
                logp[i] = gaussian::log_prob(&a64, &out.mu, &out.log_std);
                actions[i * j..(i + 1) * j].copy_from_slice(&a);
                let aux = self.envs.env(b).aux_targets();
                let put = |dst: &mut [T], src: &[f64], w: usize| {
                    for (d, s) in dst[i * w..(i + 1) * w].iter_mut().zip(src) {
                        *d = T::of(*s);
                    }
                };
                put(&mut vel, &aux.base_vel, 3);
                put(&mut contacts, &aux.contacts, kc);
                put(&mut refp, &aux.ref_pos, 3 * kp);
                put(&mut robp, &aux.robot_pos, 3 * kp);
                acts.push(a64);
            }
            let results = self.envs.step(&acts);
            for (b, res) in results.into_iter().enumerate() {
                if self.failed[b] {
                    continue;
                }
                let i = b * steps + t;
                match res {
                    Ok(o) => {
                        valid[i] = true;
                        rewards[i] = o.reward;
                        stats.steps += 1;
                        stats.reward_sum += o.reward;
                        for (s, x) in term_sums.iter_mut().zip(o.terms.0) {
                            *s += x;
                        }
                        self.returns[b] += o.reward;
                        self.lengths[b] += 1;
                        if let Some(reason) = o.termination {
                            dones[i] = true;
                            stats.episodes.push(EpisodeSummary {
                                env: b,
                                ret: self.returns[b],
                                len: self.lengths[b],
                                termination: reason.name().to_string(),
                            });
                            self.caches[b].clear();
                            self.restart(b);
                        }
                    }
                    Err(e) => {
                        stats.env_errors.push(format!("env {b}: {e}"));
                        self.failed[b] = true;
                        self.caches[b].clear();
                        if t > 0 && valid[i - 1] {
                            dones[i - 1] = true;
                        }
                    }
                }
            }
        }
        let mut crit_rows = Vec::with_capacity(b_n * cd);
        for b in 0..b_n {
            if self.failed[b] {
                crit_rows.extend(std::iter::repeat_n(T::zero(), cd));
            } else {
                crit_rows.extend(model.normalize_critic(&self.envs.env(b).observation().critic));
            }
        }
        let mut bootstrap = model.values(&Tensor::matrix(b_n, cd, crit_rows)?)?;
        for (b, v) in bootstrap.iter_mut().enumerate() {
            if self.failed[b] {
                *v = 0.0;
            }
        }
        let nv = stats.steps.max(1) as f64;
        stats.term_means = TERM_NAMES.iter().zip(term_sums).map(|(k, s)| (k.to_string(), s / nv)).collect();
        let batch = RolloutBatch {
            envs: b_n,
            steps,
            obs: Tensor::matrix(n, od, obs)?,
            critic_obs: Tensor::matrix(n, cd, critic)?,
            positions,
            actions: Tensor::matrix(n, j, actions)?,
            old_log_probs: logp,
            rewards,
            values,
            dones,
            valid,
            bootstrap,
            base_vel: Tensor::matrix(n, 3, vel)?,
            contacts: Tensor::matrix(n, kc, contacts)?,
            ref_pos: Tensor::matrix(n, 3 * kp, refp)?,
            robot_pos: Tensor::matrix(n, 3 * kp, robp)?,
        };
        Ok((batch, stats))
    }
}

impl<T: Real> RolloutBatch<T> {
    /// Random contents with the widths of `dims`: uniform observations,
    /// actions in ±1.5, binary contacts, one episode per segment and
    /// every step valid. Behavior log-probs are left at zero.
    pub fn random(dims: &InterfaceDims, envs: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let n = envs * steps;
        let mut uni = |rows: usize, cols: usize, lo: f64, hi: f64| {
            let d = (0..rows * cols).map(|_| T::of(rng.random_range(lo..hi))).collect();
            Tensor::matrix(rows, cols, d).expect("random rows")
        };
        let obs = uni(n, dims.obs_dim, -2.0, 2.0);
        let critic_obs = uni(n, dims.critic_dim, -2.0, 2.0);
        let actions = uni(n, dims.action_dim, -1.5, 1.5);
        let base_vel = uni(n, 3, -1.0, 1.0);
        let contacts = uni(n, dims.contact_bodies, 0.0, 1.0).map(|c| if c.f64() > 0.5 { T::one() } else { T::zero() });
        let ref_pos = uni(n, 3 * dims.pos_bodies, -1.0, 1.0);
        let robot_pos = uni(n, 3 * dims.pos_bodies, -1.0, 1.0);
        let rewards = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bootstrap = (0..envs).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            envs,
            steps,
            obs,
            critic_obs,
            positions: (0..envs).flat_map(|_| 0..steps).collect(),
            actions,
            old_log_probs: vec![0.0; n],
            rewards,
            values,
            dones: vec![false; n],
            valid: vec![true; n],
            bootstrap,
            base_vel,
            contacts,
            ref_pos,
            robot_pos,
        }
    }
}
