//! Dense tracking reward. Tracking kernels are `w · exp(−e / σ²)`;
//! penalties are `w · count` or `w · ‖·‖²` with negative `w`.

use serde::{Deserialize, Serialize};

use crate::clip::Frame;
use crate::robot::{body_states, five_points, norm, norm2, sub, to_body, wrap_angle, RobotConfig, RootState};
use crate::state::EnvState;

pub const SIGMA_KB_POS: f64 = 0.3;
pub const SIGMA_KB_ROT: f64 = 0.4;
pub const SIGMA_KB_LIN: f64 = 1.0;
pub const SIGMA_KB_ANG: f64 = 3.14;
pub const SIGMA_ROOT_LIN: f64 = 1.0;
pub const SIGMA_ROOT_ANG: f64 = 1.0;
pub const SIGMA_FIVE_POINT: f64 = 0.1;
pub const RATIO_EPS: f64 = 0.1;
/// Contact force above which a non-foot body counts as an undesired contact.
pub const CONTACT_FORCE_THRESHOLD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alive: f64,
    pub kb_pos: f64,
    pub kb_rot: f64,
    pub kb_lin_vel: f64,
    pub kb_ang_vel: f64,
    pub root_lin_ratio: f64,
    pub root_ang_ratio: f64,
    pub five_point: f64,
    pub action_rate: f64,
    pub joint_acc: f64,
    pub joint_limit: f64,
    pub undesired_contact: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alive: 0.1,
            kb_pos: 1.0,
            kb_rot: 1.0,
            kb_lin_vel: 1.0,
            kb_ang_vel: 1.0,
            root_lin_ratio: 1.0,
            root_ang_ratio: 1.0,
            five_point: 2.0,
            action_rate: -0.2,
            joint_acc: -1e-6,
            joint_limit: -10.0,
            undesired_contact: -0.1,
        }
    }
}

impl RewardWeights {
    /// Sum of the weights of the alive and tracking terms.
    pub fn tracking_max(&self) -> f64 {
        self.alive
            + self.kb_pos
            + self.kb_rot
            + self.kb_lin_vel
            + self.kb_ang_vel
            + self.root_lin_ratio
            + self.root_ang_ratio
            + self.five_point
    }
}

pub const TERM_NAMES: [&str; 12] = [
    "alive",
    "kb_pos",
    "kb_rot",
    "kb_lin_vel",
    "kb_ang_vel",
    "root_lin_ratio",
    "root_ang_ratio",
    "five_point",
    "action_rate",
    "joint_acc",
    "joint_limit",
    "undesired_contact",
];

/// Weighted contribution of each term, in [`TERM_NAMES`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTerms(pub [f64; 12]);

impl RewardTerms {
    pub fn get(&self, name: &str) -> f64 {
        let i = TERM_NAMES
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("no reward term {name}"));
        self.0[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        TERM_NAMES.iter().copied().zip(self.0.iter().copied())
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `‖v_p − v_g‖ / (‖v_g‖ + ε)`.
pub fn velocity_ratio(vp: [f64; 3], vg: [f64; 3]) -> f64 {
    norm(sub(vp, vg)) / (norm(vg) + RATIO_EPS)
}

pub fn joint_limit_violations(cfg: &RobotConfig, q: &[f64]) -> usize {
    q.iter()
        .enumerate()
        .filter(|&(j, &v)| v < cfg.q_min[j] || v > cfg.q_max[j])
        .count()
}

pub fn undesired_contacts(cfg: &RobotConfig, forces: &[f64]) -> usize {
    forces
        .iter()
        .enumerate()
        .filter(|&(b, &f)| !cfg.is_foot(b) && f > CONTACT_FORCE_THRESHOLD)
        .count()
}

fn local(root: &RootState, p: [f64; 3]) -> [f64; 3] {
    to_body(root.pitch, sub(p, root.pos))
}

/// Reward for the robot in `state` tracking `frame` after taking `action`.
pub fn compute_reward(
    cfg: &RobotConfig,
    w: &RewardWeights,
    state: &EnvState,
    frame: &Frame,
    action: &[f64],
    prev_action: &[f64],
) -> (f64, RewardTerms) {
    let ref_root = frame.root();
    let robot = body_states(cfg, &state.root, &state.q, &state.qd);
    let goal = body_states(cfg, &ref_root, &frame.q, &frame.qd);
    let nb = robot.len() as f64;

    let (mut pos, mut rot, mut lin, mut ang) = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in robot.iter().zip(&goal) {
        let pr = sub(p.pos, state.root.pos);
        let gr = sub(g.pos, ref_root.pos);
        pos += norm2(sub(pr, gr));
        rot += wrap_angle((p.angle - state.root.pitch) - (g.angle - ref_root.pitch)).powi(2);
        lin += norm2(sub(p.vel, g.vel));
        ang += norm2(sub(p.ang_vel3(), g.ang_vel3()));
    }
    let kernel = |sum: f64, sigma: f64| (-(sum / nb) / (sigma * sigma)).exp();

    let fp = five_points(cfg, &state.root, &robot, &state.q, &state.qd);
    let fg = five_points(cfg, &ref_root, &goal, &frame.q, &frame.qd);
    let five: f64 = fp
        .iter()
        .zip(&fg)
        .map(|(p, g)| norm2(sub(local(&state.root, *p), local(&ref_root, *g))))
        .sum::<f64>()
        / 5.0;

    let rho_lin = velocity_ratio(state.root.vel, ref_root.vel);
    let rho_ang = velocity_ratio(state.ang_vel(), [0.0, ref_root.pitch_rate, 0.0]);
    let rate: f64 = action.iter().zip(prev_action).map(|(a, b)| (a - b).powi(2)).sum();
    let acc: f64 = state.qdd.iter().map(|a| a * a).sum();

    let terms = RewardTerms([
        w.alive,
        w.kb_pos * kernel(pos, SIGMA_KB_POS),
        w.kb_rot * kernel(rot, SIGMA_KB_ROT),
        w.kb_lin_vel * kernel(lin, SIGMA_KB_LIN),
        w.kb_ang_vel * kernel(ang, SIGMA_KB_ANG),
        w.root_lin_ratio * (-(rho_lin * rho_lin) / (SIGMA_ROOT_LIN * SIGMA_ROOT_LIN)).exp(),
        w.root_ang_ratio * (-(rho_ang * rho_ang) / (SIGMA_ROOT_ANG * SIGMA_ROOT_ANG)).exp(),
        w.five_point * (-five / (SIGMA_FIVE_POINT * SIGMA_FIVE_POINT)).exp(),
        w.action_rate * rate,
        w.joint_acc * acc,
        w.joint_limit * joint_limit_violations(cfg, &state.q) as f64,
        w.undesired_contact * undesired_contacts(cfg, &state.body_forces) as f64,
    ]);
    (terms.total(), terms)
}
