//! Per-episode randomization and pushes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::robot::Vec3;
use crate::terrain::Terrain;
use crate::{Result, SimError};

/// Closed interval `[lo, hi]`; a point when `lo == hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub fn point(x: f64) -> Self {
        Span(x, x)
    }

    pub fn sym(half: f64) -> Self {
        Span(-half, half)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.0 <= x && x <= self.1
    }

    fn valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

fn sample3(s: &[Span; 3], rng: &mut impl Rng) -> Vec3 {
    [s[0].sample(rng), s[1].sample(rng), s[2].sample(rng)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRandSpec {
    /// Inclusive range of whole control steps.
    pub action_delay: [usize; 2],
    pub terrain_height: Span,
    pub static_friction: Span,
    pub dynamic_friction: Span,
    pub restitution: Span,
    pub default_joint_offset: Span,
    pub mass_offset: Span,
    pub com_offset: [Span; 3],
    pub kp_scale: Span,
    pub kd_scale: Span,
    pub init_root_pos: [Span; 3],
    /// Roll, pitch, yaw.
    pub init_root_rot: [Span; 3],
    pub init_root_vel: [Span; 3],
    pub init_joint_pos: Span,
    pub push_interval: Span,
    pub push_lin_vel: [Span; 3],
    /// Roll, pitch, yaw rates.
    pub push_ang_vel: [Span; 3],
}

impl Default for DomainRandSpec {
    fn default() -> Self {
        Self::paper()
    }
}

impl DomainRandSpec {
    pub fn paper() -> Self {
        Self {
            action_delay: [0, 2],
            terrain_height: Span(0.0, 0.04),
            static_friction: Span(0.3, 1.6),
            dynamic_friction: Span(0.3, 1.2),
            restitution: Span(0.0, 0.5),
            default_joint_offset: Span::sym(0.01),
            mass_offset: Span(-1.0, 2.0),
            com_offset: [Span::sym(0.075), Span::sym(0.1), Span::sym(0.1)],
            kp_scale: Span(0.9, 1.1),
            kd_scale: Span(0.9, 1.1),
            init_root_pos: [Span::sym(0.05), Span::sym(0.05), Span::sym(0.01)],
            init_root_rot: [Span::sym(0.1), Span::sym(0.1), Span::sym(0.2)],
            init_root_vel: [Span::sym(0.5), Span::sym(0.5), Span::sym(0.2)],
            init_joint_pos: Span::sym(0.1),
            push_interval: Span(1.0, 3.0),
            push_lin_vel: [Span::sym(0.5), Span::sym(0.5), Span::sym(0.2)],
            push_ang_vel: [Span::sym(0.52), Span::sym(0.52), Span::sym(0.78)],
        }
    }

    /// Every range collapsed to its nominal point; pushes add nothing.
    pub fn nominal() -> Self {
        let zero3 = [Span::point(0.0); 3];
        Self {
            action_delay: [0, 0],
            terrain_height: Span::point(0.0),
            static_friction: Span::point(1.0),
            dynamic_friction: Span::point(0.8),
            restitution: Span::point(0.0),
            default_joint_offset: Span::point(0.0),
            mass_offset: Span::point(0.0),
            com_offset: zero3,
            kp_scale: Span::point(1.0),
            kd_scale: Span::point(1.0),
            init_root_pos: zero3,
            init_root_rot: zero3,
            init_root_vel: zero3,
            init_joint_pos: Span::point(0.0),
            push_interval: Span::point(2.0),
            push_lin_vel: zero3,
            push_ang_vel: zero3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spans = [
            self.terrain_height,
            self.static_friction,
            self.dynamic_friction,
            self.restitution,
            self.default_joint_offset,
            self.mass_offset,
            self.kp_scale,
            self.kd_scale,
            self.init_joint_pos,
            self.push_interval,
        ];
        let triples = [
            self.com_offset,
            self.init_root_pos,
            self.init_root_rot,
            self.init_root_vel,
            self.push_lin_vel,
            self.push_ang_vel,
        ];
        if self.action_delay[0] > self.action_delay[1]
            || !spans.iter().chain(triples.iter().flatten()).all(Span::valid)
        {
            return Err(SimError::Config("randomization: every range needs lo <= hi".into()));
        }
        if self.push_interval.0 <= 0.0 || self.terrain_height.0 < 0.0 || self.kp_scale.0 <= 0.0 || self.kd_scale.0 <= 0.0 {
            return Err(SimError::Config(
                "randomization: push interval and gain scales must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Physical parameters fixed for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeParams {
    pub action_delay: usize,
    pub terrain: Terrain,
    pub static_friction: f64,
    pub dynamic_friction: f64,
    pub restitution: f64,
    pub q0_offset: Vec<f64>,
    pub mass_offset: f64,
    pub com_offset: Vec3,
    pub kp_scale: Vec<f64>,
    pub kd_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitPerturbation {
    pub root_pos: Vec3,
    pub root_rot: Vec3,
    pub root_vel: Vec3,
    pub q: Vec<f64>,
}

pub fn sample_episode(spec: &DomainRandSpec, num_joints: usize, rng: &mut impl Rng) -> EpisodeParams {
    let [lo, hi] = spec.action_delay;
    EpisodeParams {
        action_delay: rng.random_range(lo..=hi),
        terrain: Terrain::random(spec.terrain_height, rng),
        static_friction: spec.static_friction.sample(rng),
        dynamic_friction: spec.dynamic_friction.sample(rng),
        restitution: spec.restitution.sample(rng),
        q0_offset: (0..num_joints).map(|_| spec.default_joint_offset.sample(rng)).collect(),
        mass_offset: spec.mass_offset.sample(rng),
        com_offset: sample3(&spec.com_offset, rng),
        kp_scale: (0..num_joints).map(|_| spec.kp_scale.sample(rng)).collect(),
        kd_scale: (0..num_joints).map(|_| spec.kd_scale.sample(rng)).collect(),
    }
}

pub fn sample_init(spec: &DomainRandSpec, num_joints: usize, rng: &mut impl Rng) -> InitPerturbation {
    InitPerturbation {
        root_pos: sample3(&spec.init_root_pos, rng),
        root_rot: sample3(&spec.init_root_rot, rng),
        root_vel: sample3(&spec.init_root_vel, rng),
        q: (0..num_joints).map(|_| spec.init_joint_pos.sample(rng)).collect(),
    }
}

/// Linear and angular velocity kicks of one push.
pub fn sample_push(spec: &DomainRandSpec, rng: &mut impl Rng) -> (Vec3, Vec3) {
    (sample3(&spec.push_lin_vel, rng), sample3(&spec.push_ang_vel, rng))
}
