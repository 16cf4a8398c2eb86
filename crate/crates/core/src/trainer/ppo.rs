use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use diffmath::{Binder, Graph, Real, Tensor, Var};

use super::adamw::{clip_grad_norm, AdamW};
use super::config::PpoConfig;
use super::gae::{gae, normalize};
use super::losses::{
    clipped_surrogate, contact_bce, dead_expert_margin, position_mse, value_mse, velocity_nll,
};
use super::rollout::RolloutBatch;
use crate::policy::{gaussian, ActorOutputs, AuxOutputs, ForwardStats, LayerRoute, PolicyModel, SeqInput};
use crate::{Error, Result};

/// How per-step actor outputs are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One causal pass per segment.
    Sequence,
    /// One pass per step over its own attention window.
    StepLevel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    /// Clipped surrogate objective (maximized).
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub vel: f64,
    pub contact: f64,
    pub ref_pos: f64,
    pub robot_pos: f64,
    pub dead: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// `max |r − 1|` over the first forward pass after collection.
    pub first_ratio_dev: f64,
    /// Actor (with auxiliary heads) gradient norm before clipping.
    pub grad_norm: f64,
    pub critic_grad_norm: f64,
    pub updates: usize,
    pub stats: Stats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stats {
    pub passes: usize,
    pub tokens: usize,
    pub expert_evals: usize,
}

impl From<ForwardStats> for Stats {
    fn from(s: ForwardStats) -> Self {
        Self {
            passes: s.passes,
            tokens: s.tokens,
            expert_evals: s.expert_evals,
        }
    }
}

impl LossReport {
    /// Weighted sum of the components with the given configuration.
    pub fn recombine(&self, cfg: &PpoConfig) -> f64 {
        let a = &cfg.aux;
        -self.policy + cfg.value_coef * self.value - cfg.entropy_coef * self.entropy
            + a.vel * self.vel
            + a.contact * self.contact
            + a.ref_pos * self.ref_pos
            + a.robot_pos * self.robot_pos
            + a.dead * self.dead
    }

    fn accumulate(&mut self, o: &LossReport) {
        self.total += o.total;
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.vel += o.vel;
        self.contact += o.contact;
        self.ref_pos += o.ref_pos;
        self.robot_pos += o.robot_pos;
        self.dead += o.dead;
        self.approx_kl += o.approx_kl;
        self.clip_fraction += o.clip_fraction;
        self.grad_norm += o.grad_norm;
        self.critic_grad_norm += o.critic_grad_norm;
        self.updates += 1;
        self.stats.passes += o.stats.passes;
        self.stats.tokens += o.stats.tokens;
        self.stats.expert_evals += o.stats.expert_evals;
    }

    fn finish(&mut self) {
        let n = self.updates.max(1) as f64;
        for x in [
            &mut self.total,
            &mut self.policy,
            &mut self.value,
            &mut self.entropy,
            &mut self.vel,
            &mut self.contact,
            &mut self.ref_pos,
            &mut self.robot_pos,
            &mut self.dead,
            &mut self.approx_kl,
            &mut self.clip_fraction,
            &mut self.grad_norm,
            &mut self.critic_grad_norm,
        ] {
            *x /= n;
        }
    }
}

fn rows_of<T: Real>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let c = t.cols();
    Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec()).expect("row range")
}

/// First token of the attention window of token `t` within its segment.
pub fn window_start(positions: &[usize], seg_start: usize, t: usize, context: usize) -> usize {
    let back = positions[t].min(t - seg_start).min(context - 1);
    t - back
}

/// Actor outputs for every row of `input` in the chosen mode.
pub fn actor_outputs<T: Real>(
    model: &PolicyModel<T>,
    g: &mut Graph<T>,
    b: &mut Binder,
    input: &SeqInput<T>,
    mode: Mode,
) -> Result<ActorOutputs> {
    if mode == Mode::Sequence {
        return model.forward(g, b, input);
    }
    let n = input.obs.rows();
    let c = model.config().context;
    let mut last = Vec::with_capacity(n);
    let mut stats = ForwardStats::default();
    for t in 0..n {
        let seg_start = t - t % input.seg_len;
        let s = window_start(&input.positions, seg_start, t, c);
        let w = SeqInput::single(rows_of(&input.obs, s, t + 1 - s), input.positions[s..=t].to_vec());
        let out = model.forward(g, b, &w)?;
        stats += out.stats;
        last.push(out);
    }
    let pick = |g: &mut Graph<T>, f: &dyn Fn(&ActorOutputs) -> Var| -> Result<Var> {
        let rows = last
            .iter()
            .map(|o| {
                let v = f(o);
                let r = g.dims(v).0;
                g.slice_rows(v, r - 1, 1)
            })
            .collect::<diffmath::Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows)?)
    };
    let mu = pick(g, &|o| o.mu)?;
    let pre_moe = pick(g, &|o| o.pre_moe)?;
    let aux = AuxOutputs {
        vel_mu: pick(g, &|o| o.aux.vel_mu)?,
        vel_log_std: pick(g, &|o| o.aux.vel_log_std)?,
        contact_logits: pick(g, &|o| o.aux.contact_logits)?,
        ref_pos: pick(g, &|o| o.aux.ref_pos)?,
        robot_pos: pick(g, &|o| o.aux.robot_pos)?,
    };
    let layers = model.config().blocks;
    let mut routes = Vec::with_capacity(layers);
    for l in 0..layers {
        let scores = pick(g, &|o| o.routes[l].scores)?;
        let decisions = last.iter().map(|o| o.routes[l].decisions.last().expect("token").clone()).collect();
        routes.push(LayerRoute { scores, decisions });
    }
    Ok(ActorOutputs {
        mu,
        log_std: last[0].log_std,
        pre_moe,
        aux,
        routes,
        stats,
    })
}

/// Log-probabilities of the stored actions under the current parameters.
pub fn log_probs<T: Real>(model: &PolicyModel<T>, batch: &RolloutBatch<T>, mode: Mode) -> Result<(Vec<f64>, ForwardStats)> {
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let out = actor_outputs(model, &mut g, &mut b, &batch.seq_input(), mode)?;
    let a = g.constant(batch.actions.clone())?;
    let lp = gaussian::log_prob_rows(&mut g, out.mu, out.log_std, a)?;
    Ok((g.value(lp).to_f64_vec(), out.stats))
}

/// Normalized advantages and value targets of a batch.
pub fn advantages<T: Real>(batch: &RolloutBatch<T>, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let (mut adv, ret) = gae(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        &batch.valid,
        &batch.bootstrap,
        batch.steps,
        cfg.gamma,
        cfg.gae_lambda,
    );
    normalize(&mut adv, &batch.valid, cfg.adv_eps);
    (adv, ret)
}

struct Built {
    total: Var,
    parts: [Var; 8],
    dead: Option<Var>,
    ratio: Var,
    logp: Var,
    stats: ForwardStats,
}

fn column<T: Real>(g: &mut Graph<T>, v: &[f64]) -> diffmath::Result<Var> {
    g.constant(Tensor::column(v.iter().map(|&x| T::of(x)).collect()))
}

#[allow(clippy::too_many_arguments)]
fn build<T: Real>(
    model: &PolicyModel<T>,
    g: &mut Graph<T>,
    b: &mut Binder,
    batch: &RolloutBatch<T>,
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    mode: Mode,
) -> Result<Built> {
    let n = batch.num_valid() as f64;
    let mask: Vec<f64> = batch.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = column(g, &mask)?;
    let out = actor_outputs(model, g, b, &batch.seq_input(), mode)?;
    let actions = g.constant(batch.actions.clone())?;
    let logp = gaussian::log_prob_rows(g, out.mu, out.log_std, actions)?;
    let old = column(g, &batch.old_log_probs)?;
    let advv = column(g, adv)?;
    let (policy, ratio) = clipped_surrogate(g, logp, old, advv, mask, n, cfg.clip)?;
    let cobs = g.constant(batch.critic_obs.clone())?;
    let v = model.critic(g, b, cobs)?;
    let (vm, vs) = model.value_scale();
    let target: Vec<f64> = ret.iter().map(|r| (r - vm) / vs).collect();
    let retv = column(g, &target)?;
    let value = value_mse(g, v, retv, mask, n)?;
    let entropy = gaussian::entropy_graph(g, out.log_std)?;
    let vt = g.constant(batch.base_vel.clone())?;
    let vel = velocity_nll(g, out.aux.vel_mu, out.aux.vel_log_std, vt, mask, n)?;
    let ct = g.constant(batch.contacts.clone())?;
    let contact = contact_bce(g, out.aux.contact_logits, ct, mask, n)?;
    let rt = g.constant(batch.ref_pos.clone())?;
    let ref_pos = position_mse(g, out.aux.ref_pos, rt, mask, n)?;
    let pt = g.constant(batch.robot_pos.clone())?;
    let robot_pos = position_mse(g, out.aux.robot_pos, pt, mask, n)?;
    let dead = dead_expert_margin(g, &out.routes, &batch.valid, model.config().experts)?;

    let a = &cfg.aux;
    let mut terms = vec![
        (policy, -1.0),
        (value, cfg.value_coef),
        (entropy, -cfg.entropy_coef),
        (vel, a.vel),
        (contact, a.contact),
        (ref_pos, a.ref_pos),
        (robot_pos, a.robot_pos),
    ];
    if let Some(d) = dead {
        terms.push((d, a.dead));
    }
    let mut total = None;
    for (v, w) in terms {
        let s = g.scale(v, w)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let zero = g.constant(Tensor::scalar(T::zero()))?;
    Ok(Built {
        total: total.expect("terms"),
        parts: [policy, value, entropy, vel, contact, ref_pos, robot_pos, zero],
        dead,
        ratio,
        logp,
        stats: out.stats,
    })
}

fn report<T: Real>(g: &Graph<T>, built: &Built, batch: &RolloutBatch<T>, clip: f64) -> LossReport {
    let s = |v: Var| g.value(v).data()[0].f64();
    let ratios = g.value(built.ratio).to_f64_vec();
    let logp = g.value(built.logp).to_f64_vec();
    let n = batch.num_valid().max(1) as f64;
    let mut kl = 0.0;
    let mut clipped = 0.0;
    let mut dev: f64 = 0.0;
    for (i, &v) in batch.valid.iter().enumerate() {
        if v {
            kl += batch.old_log_probs[i] - logp[i];
            if (ratios[i] - 1.0).abs() > clip {
                clipped += 1.0;
            }
            dev = dev.max((ratios[i] - 1.0).abs());
        }
    }
    let p = &built.parts;
    LossReport {
        total: s(built.total),
        policy: s(p[0]),
        value: s(p[1]),
        entropy: s(p[2]),
        vel: s(p[3]),
        contact: s(p[4]),
        ref_pos: s(p[5]),
        robot_pos: s(p[6]),
        dead: built.dead.map_or(0.0, s),
        approx_kl: kl / n,
        clip_fraction: clipped / n,
        first_ratio_dev: dev,
        grad_norm: 0.0,
        critic_grad_norm: 0.0,
        updates: 1,
        stats: built.stats.into(),
    }
}

fn check_finite(r: &LossReport) -> Result<()> {
    if r.total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        what: "loss".into(),
        detail: format!(
            "total {} policy {} value {} entropy {} vel {} contact {} ref {} robot {} dead {}",
            r.total, r.policy, r.value, r.entropy, r.vel, r.contact, r.ref_pos, r.robot_pos, r.dead
        ),
    })
}

/// Loss components on the whole batch without changing parameters.
pub fn evaluate<T: Real>(model: &PolicyModel<T>, batch: &RolloutBatch<T>, cfg: &PpoConfig, mode: Mode) -> Result<LossReport> {
    let (adv, ret) = advantages(batch, cfg);
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let built = build(model, &mut g, &mut b, batch, &adv, &ret, cfg, mode)?;
    Ok(report(&g, &built, batch, cfg.clip))
}

/// Loss and per-parameter gradients on a batch, parameters unchanged.
pub fn gradients<T: Real>(
    model: &PolicyModel<T>,
    batch: &RolloutBatch<T>,
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    mode: Mode,
) -> Result<(LossReport, Vec<Option<Tensor<T>>>)> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    let built = build(model, &mut g, &mut b, batch, adv, ret, cfg, mode)?;
    let rep = report(&g, &built, batch, cfg.clip);
    check_finite(&rep)?;
    let grads = g.backward(built.total)?;
    Ok((rep, b.collect(&model.params, &grads)))
}

/// Clips actor and critic gradients separately to `max` global norm;
/// returns the two norms before clipping.
pub fn clip_by_network<T: Real>(model: &PolicyModel<T>, grads: &mut [Option<Tensor<T>>], max: f64) -> (f64, f64) {
    let critic: Vec<bool> = model.params.ids().map(|id| model.params.name(id).starts_with("critic.")).collect();
    let mut actor_part: Vec<Option<Tensor<T>>> = Vec::with_capacity(grads.len());
    let mut critic_part: Vec<Option<Tensor<T>>> = Vec::with_capacity(grads.len());
    for (g, &c) in grads.iter_mut().zip(&critic) {
        let g = g.take();
        if c {
            actor_part.push(None);
            critic_part.push(g);
        } else {
            actor_part.push(g);
            critic_part.push(None);
        }
    }
    let na = clip_grad_norm(&mut actor_part, max);
    let nc = clip_grad_norm(&mut critic_part, max);
    for ((g, a), c) in grads.iter_mut().zip(actor_part).zip(critic_part) {
        *g = a.or(c);
    }
    (na, nc)
}

/// `epochs` passes over the batch in shuffled segment groups, one
/// optimizer step per group. Value statistics absorb the new returns
/// before the first step.
pub fn update<T: Real>(
    model: &mut PolicyModel<T>,
    opt: &mut AdamW,
    batch: &RolloutBatch<T>,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
    mode: Mode,
) -> Result<LossReport> {
    let (adv, ret) = advantages(batch, cfg);
    for (r, &v) in ret.iter().zip(&batch.valid) {
        if v {
            model.value_norm.update(&[*r]);
        }
    }
    let mut acc = LossReport::default();
    let mut first = None;
    let per = batch.envs.div_ceil(cfg.minibatches);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batch.envs).collect();
        if cfg.minibatches > 1 {
            order.shuffle(rng);
        }
        for segs in order.chunks(per) {
            let sub = batch.select(segs);
            if sub.num_valid() == 0 {
                continue;
            }
            let sa: Vec<f64> = segs.iter().flat_map(|&s| adv[s * batch.steps..(s + 1) * batch.steps].to_vec()).collect();
            let sr: Vec<f64> = segs.iter().flat_map(|&s| ret[s * batch.steps..(s + 1) * batch.steps].to_vec()).collect();
            let (mut rep, mut grads) = gradients(model, &sub, &sa, &sr, cfg, mode)?;
            first.get_or_insert(rep.first_ratio_dev);
            (rep.grad_norm, rep.critic_grad_norm) = clip_by_network(model, &mut grads, cfg.max_grad_norm);
            if !(rep.grad_norm.is_finite() && rep.critic_grad_norm.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    detail: format!("actor norm {} critic norm {}", rep.grad_norm, rep.critic_grad_norm),
                });
            }
            opt.step(&mut model.params, &grads);
            acc.accumulate(&rep);
        }
    }
    acc.finish();
    acc.first_ratio_dev = first.unwrap_or(0.0);
    Ok(acc)
}
