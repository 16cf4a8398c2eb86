//! Central-difference check of the full PPO objective.

use holomotion::policy::PolicyModel;
use holomotion::trainer::ppo::{self, Mode};
use holomotion::trainer::{PpoConfig, RolloutBatch};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn model() -> PolicyModel<f64> {
    let mut m = PolicyModel::<f64>::new(super::tiny()).unwrap();
    for x in [3.0, -1.0, 7.5, 0.5] {
        m.value_norm.update(&[x]);
    }
    // Move the action log-std and head off their initial symmetric values.
    let mut r = super::rng(77);
    for name in ["log_std", "head.l2.w", "aux.vel_log_std.w"] {
        let id = m.params.find(name).unwrap();
        for v in m.params.get_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    m
}

/// Behavior log-probs offset so that ratios fall on both sides of the clip
/// range but never near its edges.
pub fn batch(m: &PolicyModel<f64>, envs: usize, steps: usize, seed: u64) -> RolloutBatch<f64> {
    let mut r = super::rng(seed);
    let mut b = RolloutBatch::random(&m.config().dims, envs, steps, &mut r);
    if steps > 2 {
        b.dones[1] = true;
        for p in 2..steps {
            b.positions[p] = p - 2;
        }
    }
    let (lp, _) = ppo::log_probs(m, &b, Mode::Sequence).unwrap();
    let (lo, hi) = (0.8f64.ln(), 1.2f64.ln());
    b.old_log_probs = lp
        .iter()
        .map(|l| loop {
            let d: f64 = r.random_range(-0.5..0.5);
            if (d - lo).abs() > 0.03 && (d - hi).abs() > 0.03 {
                break l - d;
            }
        })
        .collect();
    b
}

pub struct Worst {
    pub rel: f64,
    pub name: String,
    pub checked: usize,
}

pub fn check(m: &PolicyModel<f64>, b: &RolloutBatch<f64>, cfg: &PpoConfig, skip: &dyn Fn(&str) -> bool) -> Worst {
    let (adv, ret) = ppo::advantages(b, cfg);
    let (_, grads) = ppo::gradients(m, b, &adv, &ret, cfg, Mode::Sequence).unwrap();
    let mut probe = m.clone();
    let mut worst = Worst { rel: 0.0, name: String::new(), checked: 0 };
    let ids: Vec<_> = m.params.ids().collect();
    for (id, g) in ids.into_iter().zip(&grads) {
        let name = m.params.name(id).to_string();
        if skip(&name) {
            continue;
        }
        for j in 0..m.params.get(id).len() {
            let x0 = m.params.get(id).data()[j];
            probe.params.get_mut(id).data_mut()[j] = x0 + H;
            let up = ppo::evaluate(&probe, b, cfg, Mode::Sequence).unwrap().total;
            probe.params.get_mut(id).data_mut()[j] = x0 - H;
            let down = ppo::evaluate(&probe, b, cfg, Mode::Sequence).unwrap().total;
            probe.params.get_mut(id).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * H);
            let analytic = g.as_ref().map_or(0.0, |t| t.data()[j]);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR);
            if rel > worst.rel {
                worst.rel = rel;
                worst.name = format!("{name}[{j}] analytic {analytic:e} numeric {numeric:e}");
            }
            worst.checked += 1;
        }
    }
    worst
}

pub fn full_cfg() -> PpoConfig {
    PpoConfig { entropy_coef: 0.01, ..PpoConfig::default() }
}
