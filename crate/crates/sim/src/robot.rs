//! Planar biped: a floating root with pitch and two serial legs hanging
//! from hips at `y = ±w`. The sagittal plane is `x-z`, pitch rotates about
//! `y`.

use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

pub type Vec3 = [f64; 3];

pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub num_joints: usize,
    pub q0: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    /// Hip to foot length of a straight leg (m).
    pub leg_length: f64,
    pub hip_half_width: f64,
    pub torso_height: f64,
    /// Extra height of the torso point in the five-point set.
    pub torso_offset: f64,
    pub mass: f64,
    /// Control period (s).
    pub dt: f64,
    pub substeps: usize,
}

impl RobotConfig {
    /// `j` joints split over two legs, the left leg taking the extra joint
    /// when `j` is odd.
    pub fn biped(j: usize) -> Self {
        Self {
            num_joints: j,
            q0: vec![0.0; j],
            action_scale: vec![0.5; j],
            kp: vec![100.0; j],
            kd: vec![20.0; j],
            q_min: vec![-1.5; j],
            q_max: vec![1.5; j],
            leg_length: 0.8,
            hip_half_width: 0.1,
            torso_height: 0.4,
            torso_offset: 0.1,
            mass: 10.0,
            dt: 0.02,
            substeps: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.num_joints;
        let bad = |m: &str| Err(SimError::Config(format!("robot: {m}")));
        if j < 2 {
            return bad("at least two joints are required");
        }
        for (name, v) in [
            ("q0", &self.q0),
            ("action_scale", &self.action_scale),
            ("kp", &self.kp),
            ("kd", &self.kd),
            ("q_min", &self.q_min),
            ("q_max", &self.q_max),
        ] {
            if v.len() != j {
                return bad(&format!("{name} has {} entries for {j} joints", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(&format!("{name} is not finite"));
            }
        }
        if self.kp.iter().chain(&self.kd).any(|&g| g <= 0.0) {
            return bad("gains must be positive");
        }
        if self.q_min.iter().zip(&self.q_max).any(|(lo, hi)| lo >= hi) {
            return bad("q_min must be below q_max");
        }
        if !(self.leg_length > 0.0 && self.mass > 0.0 && self.dt > 0.0 && self.substeps > 0) {
            return bad("lengths, mass, dt and substeps must be positive");
        }
        Ok(())
    }

    pub fn left_joints(&self) -> std::ops::Range<usize> {
        0..self.num_joints.div_ceil(2)
    }

    pub fn right_joints(&self) -> std::ops::Range<usize> {
        self.num_joints.div_ceil(2)..self.num_joints
    }

    pub fn legs(&self) -> [(std::ops::Range<usize>, f64); 2] {
        [
            (self.left_joints(), self.hip_half_width),
            (self.right_joints(), -self.hip_half_width),
        ]
    }

    /// Key bodies: root, torso, then the end of the link driven by each
    /// joint, so joint `j` ends at body `2 + j`.
    pub fn num_bodies(&self) -> usize {
        self.num_joints + 2
    }

    pub fn feet(&self) -> [usize; 2] {
        [2 + self.left_joints().end - 1, 2 + self.num_joints - 1]
    }

    pub fn is_foot(&self, body: usize) -> bool {
        self.feet().contains(&body)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RootState {
    pub pos: Vec3,
    pub pitch: f64,
    pub vel: Vec3,
    pub pitch_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BodyState {
    pub pos: Vec3,
    pub angle: f64,
    pub vel: Vec3,
    pub ang_vel: f64,
}

impl BodyState {
    pub fn ang_vel3(&self) -> Vec3 {
        [0.0, self.ang_vel, 0.0]
    }
}

/// Direction of a link hanging at absolute pitch `phi`.
fn down(phi: f64) -> Vec3 {
    [-phi.sin(), 0.0, -phi.cos()]
}

fn down_rate(phi: f64) -> Vec3 {
    [-phi.cos(), 0.0, phi.sin()]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm2(a: Vec3) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

pub fn norm(a: Vec3) -> f64 {
    norm2(a).sqrt()
}

/// World vector expressed in a frame pitched by `theta`.
pub fn to_body(theta: f64, v: Vec3) -> Vec3 {
    let (s, c) = theta.sin_cos();
    [v[0] * c - v[2] * s, v[1], v[0] * s + v[2] * c]
}

/// World gravity direction seen from a body pitched by `theta`.
pub fn projected_gravity(theta: f64) -> Vec3 {
    to_body(theta, [0.0, 0.0, -1.0])
}

/// Angle difference wrapped to `[-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w < -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// World states of every key body.
pub fn body_states(cfg: &RobotConfig, root: &RootState, q: &[f64], qd: &[f64]) -> Vec<BodyState> {
    let mut out = Vec::with_capacity(cfg.num_bodies());
    out.push(BodyState {
        pos: root.pos,
        angle: root.pitch,
        vel: root.vel,
        ang_vel: root.pitch_rate,
    });
    let (s, c) = root.pitch.sin_cos();
    let h = cfg.torso_height;
    out.push(BodyState {
        pos: add(root.pos, [h * s, 0.0, h * c]),
        angle: root.pitch,
        vel: add(root.vel, scale([c, 0.0, -s], h * root.pitch_rate)),
        ang_vel: root.pitch_rate,
    });
    for (joints, y) in cfg.legs() {
        let len = cfg.leg_length / joints.len() as f64;
        let mut p = add(root.pos, [0.0, y, 0.0]);
        let mut v = root.vel;
        let (mut phi, mut phid) = (root.pitch, root.pitch_rate);
        for j in joints {
            phi += q[j];
            phid += qd[j];
            p = add(p, scale(down(phi), len));
            v = add(v, scale(down_rate(phi), len * phid));
            out.push(BodyState {
                pos: p,
                angle: phi,
                vel: v,
                ang_vel: phid,
            });
        }
    }
    out
}

/// Position and velocity of the point half way down each leg.
pub fn mid_leg_points(cfg: &RobotConfig, root: &RootState, q: &[f64], qd: &[f64]) -> [(Vec3, Vec3); 2] {
    let mut out = [([0.0; 3], [0.0; 3]); 2];
    for (side, (joints, y)) in cfg.legs().into_iter().enumerate() {
        let n = joints.len();
        let len = cfg.leg_length / n as f64;
        let mut remaining = cfg.leg_length / 2.0;
        let mut p = add(root.pos, [0.0, y, 0.0]);
        let mut v = root.vel;
        let (mut phi, mut phid) = (root.pitch, root.pitch_rate);
        for j in joints {
            phi += q[j];
            phid += qd[j];
            let step = remaining.min(len);
            p = add(p, scale(down(phi), step));
            v = add(v, scale(down_rate(phi), step * phid));
            remaining -= step;
            if remaining <= 1e-12 {
                break;
            }
        }
        out[side] = (p, v);
    }
    out
}

/// The five-point set in world coordinates: raised torso point, both
/// mid-leg points, both feet.
pub fn five_points(cfg: &RobotConfig, root: &RootState, bodies: &[BodyState], q: &[f64], qd: &[f64]) -> [Vec3; 5] {
    let mid = mid_leg_points(cfg, root, q, qd);
    let feet = cfg.feet();
    let (s, c) = root.pitch.sin_cos();
    let torso = add(bodies[1].pos, scale([s, 0.0, c], cfg.torso_offset));
    [torso, mid[0].0, mid[1].0, bodies[feet[0]].pos, bodies[feet[1]].pos]
}

/// Bodies whose height error can end an episode: root, mid-leg points, feet.
pub fn height_points(cfg: &RobotConfig, root: &RootState, bodies: &[BodyState], q: &[f64], qd: &[f64]) -> [Vec3; 5] {
    let mid = mid_leg_points(cfg, root, q, qd);
    let feet = cfg.feet();
    [root.pos, mid[0].0, mid[1].0, bodies[feet[0]].pos, bodies[feet[1]].pos]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_legs_hang_below_root() {
        let cfg = RobotConfig::biped(4);
        let root = RootState {
            pos: [0.0, 0.0, 0.8],
            ..Default::default()
        };
        let b = body_states(&cfg, &root, &[0.0; 4], &[0.0; 4]);
        assert_eq!(b.len(), 6);
        for f in cfg.feet() {
            assert!(b[f].pos[2].abs() < 1e-12);
        }
        let mid = mid_leg_points(&cfg, &root, &[0.0; 4], &[0.0; 4]);
        assert!((mid[0].0[2] - 0.4).abs() < 1e-12);
        assert!((mid[1].0[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn analytic_body_velocity_matches_finite_difference() {
        let cfg = RobotConfig::biped(5);
        let q = [0.3, -0.2, 0.1, 0.4, -0.5];
        let qd = [1.0, -0.5, 0.7, 0.2, 0.3];
        let root = RootState {
            pos: [0.1, 0.0, 0.7],
            pitch: 0.2,
            vel: [0.3, 0.0, -0.1],
            pitch_rate: 0.4,
        };
        let h = 1e-6;
        let b0 = body_states(&cfg, &root, &q, &qd);
        let q1: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a + h * b).collect();
        let root1 = RootState {
            pos: add(root.pos, scale(root.vel, h)),
            pitch: root.pitch + h * root.pitch_rate,
            ..root
        };
        let b1 = body_states(&cfg, &root1, &q1, &qd);
        for (a, b) in b0.iter().zip(&b1) {
            let fd = scale(sub(b.pos, a.pos), 1.0 / h);
            assert!(norm(sub(fd, a.vel)) < 1e-5);
        }
    }

    #[test]
    fn gravity_is_unit_and_wrap_is_bounded() {
        for k in -20..20 {
            let t = k as f64 * 0.7;
            assert!((norm(projected_gravity(t)) - 1.0).abs() < 1e-12);
            let w = wrap_angle(t);
            assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&w));
            assert!((w - t).rem_euclid(std::f64::consts::TAU).min(
                std::f64::consts::TAU - (w - t).rem_euclid(std::f64::consts::TAU)) < 1e-9);
        }
    }

    #[test]
    fn validation_rejects_single_joint() {
        assert!(RobotConfig::biped(1).validate().is_err());
        assert!(RobotConfig::biped(2).validate().is_ok());
        let mut c = RobotConfig::biped(2);
        c.kd[1] = 0.0;
        assert!(c.validate().is_err());
    }
}
