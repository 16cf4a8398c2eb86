//! Toy floating-base dynamics. Joints are unit-inertia double integrators
//! under PD torque; the root is held up by spring-damper contacts, pushed
//! sideways by friction at contacting bodies, and kept near upright by a
//! balance spring on pitch.

use crate::random::EpisodeParams;
use crate::robot::{body_states, projected_gravity, RobotConfig, GRAVITY};
use crate::state::EnvState;

pub const CONTACT_STIFFNESS: f64 = 2.0e4;
pub const CONTACT_DAMPING: f64 = 600.0;
pub const FRICTION_VISCOSITY: f64 = 500.0;
pub const STICK_SPEED: f64 = 0.01;
pub const BALANCE_STIFFNESS: f64 = 200.0;
pub const BALANCE_DAMPING: f64 = 40.0;
pub const PITCH_INERTIA: f64 = 2.0;
pub const COM_HEIGHT: f64 = 0.3;
pub const REACTION_COUPLING: f64 = 0.02;

/// `q_tar = q0 + s ⊙ a`.
pub fn joint_targets(cfg: &RobotConfig, q0_offset: &[f64], action: &[f64]) -> Vec<f64> {
    (0..cfg.num_joints)
        .map(|j| cfg.q0[j] + q0_offset[j] + cfg.action_scale[j] * action[j])
        .collect()
}

/// `τ = k_p ⊙ (q_tar − q) − k_d ⊙ q̇` with the episode's gain scaling.
pub fn pd_torques(cfg: &RobotConfig, p: &EpisodeParams, target: &[f64], q: &[f64], qd: &[f64]) -> Vec<f64> {
    (0..cfg.num_joints)
        .map(|j| {
            cfg.kp[j] * p.kp_scale[j] * (target[j] - q[j]) - cfg.kd[j] * p.kd_scale[j] * qd[j]
        })
        .collect()
}

/// Advances one control period toward `target` and refreshes contact
/// flags, contact forces and joint accelerations.
pub fn advance(cfg: &RobotConfig, p: &EpisodeParams, target: &[f64], s: &mut EnvState) {
    let h = cfg.dt / cfg.substeps as f64;
    let qd_start = s.qd.clone();
    let mass = cfg.mass + p.mass_offset;
    let damping = CONTACT_DAMPING * (1.0 - p.restitution);
    let feet = cfg.feet();
    for _ in 0..cfg.substeps {
        let tau = pd_torques(cfg, p, target, &s.q, &s.qd);
        for j in 0..cfg.num_joints {
            s.qd[j] += h * tau[j];
            s.q[j] += h * s.qd[j];
        }

        let bodies = body_states(cfg, &s.root, &s.q, &s.qd);
        let (mut fx, mut fy, mut fz) = (0.0, 0.0, 0.0);
        for (b, body) in bodies.iter().enumerate() {
            let ground = p.terrain.height(body.pos[0], body.pos[1]);
            let depth = ground - body.pos[2];
            let normal = if depth > 0.0 {
                (CONTACT_STIFFNESS * depth - damping * body.vel[2]).max(0.0)
            } else {
                0.0
            };
            s.body_forces[b] = normal;
            if normal > 0.0 {
                let slip = body.vel[0].hypot(body.vel[1]);
                let mu = if slip < STICK_SPEED {
                    p.static_friction
                } else {
                    p.dynamic_friction
                };
                let limit = mu * normal;
                fx += (-FRICTION_VISCOSITY * body.vel[0]).clamp(-limit, limit);
                fy += (-FRICTION_VISCOSITY * body.vel[1]).clamp(-limit, limit);
                fz += normal;
            }
        }
        let com_h = COM_HEIGHT + p.com_offset[2];
        let (sin, cos) = s.root.pitch.sin_cos();
        let torque = -BALANCE_STIFFNESS * s.root.pitch - BALANCE_DAMPING * s.root.pitch_rate
            + mass * GRAVITY * (com_h * sin + p.com_offset[0] * cos)
            - REACTION_COUPLING * tau.iter().sum::<f64>();

        s.root.vel[0] += h * fx / mass;
        s.root.vel[1] += h * fy / mass;
        s.root.vel[2] += h * (fz / mass - GRAVITY);
        s.root.pitch_rate += h * torque / PITCH_INERTIA;
        s.root.pos[0] += h * s.root.vel[0];
        s.root.pos[1] += h * s.root.vel[1];
        s.root.pos[2] += h * s.root.vel[2];
        s.root.pitch += h * s.root.pitch_rate;
    }
    let bodies = body_states(cfg, &s.root, &s.q, &s.qd);
    for (k, &f) in feet.iter().enumerate() {
        let b = &bodies[f];
        s.contacts[k] = b.pos[2] <= p.terrain.height(b.pos[0], b.pos[1]);
    }
    for j in 0..cfg.num_joints {
        s.qdd[j] = (s.qd[j] - qd_start[j]) / cfg.dt;
    }
    s.gravity = projected_gravity(s.root.pitch);
}
