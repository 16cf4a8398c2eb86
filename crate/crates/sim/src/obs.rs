//! Observation layout.
//!
//! Actor and clean vectors share one layout, proprioceptive groups first:
//!
//! | group            | size  |
//! |------------------|-------|
//! | gravity          | 3     |
//! | ang_vel          | 3     |
//! | joint_pos        | J     |
//! | joint_vel        | J     |
//! | prev_action      | J     |
//! | ref_gravity      | 3H    |
//! | ref_lin_vel      | 3H    |
//! | ref_ang_vel      | 3H    |
//! | ref_joint_pos    | JH    |
//! | ref_height       | H     |
//!
//! Reference groups are frame-major within the group and cover the `H`
//! frames after the current one; past the clip end the last frame repeats.
//! Joint positions are relative to `q0`; reference velocities are in the
//! reference root frame. The critic vector appends privileged groups to the
//! clean vector.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::MotionClip;
use crate::robot::{body_states, sub, to_body, wrap_angle, RobotConfig};
use crate::state::EnvState;
use crate::{Result, SimError};

/// Uniform half-widths per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub gravity: f64,
    pub ang_vel: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub ref_gravity: f64,
    pub ref_lin_vel: f64,
    pub ref_ang_vel: f64,
    pub ref_joint_pos: f64,
    pub ref_height: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::paper()
    }
}

impl NoiseSpec {
    pub fn paper() -> Self {
        Self {
            gravity: 0.1,
            ang_vel: 0.2,
            joint_pos: 0.01,
            joint_vel: 0.5,
            ref_gravity: 0.1,
            ref_lin_vel: 0.1,
            ref_ang_vel: 0.1,
            ref_joint_pos: 0.05,
            ref_height: 0.1,
        }
    }

    pub fn zero() -> Self {
        Self {
            gravity: 0.0,
            ang_vel: 0.0,
            joint_pos: 0.0,
            joint_vel: 0.0,
            ref_gravity: 0.0,
            ref_lin_vel: 0.0,
            ref_ang_vel: 0.0,
            ref_joint_pos: 0.0,
            ref_height: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gravity,
            self.ang_vel,
            self.joint_pos,
            self.joint_vel,
            self.ref_gravity,
            self.ref_lin_vel,
            self.ref_ang_vel,
            self.ref_joint_pos,
            self.ref_height,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(SimError::Config("noise widths must be non-negative".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub num_joints: usize,
    pub num_bodies: usize,
    pub lookahead: usize,
    pub actor: Vec<Group>,
    pub privileged: Vec<Group>,
}

impl ObsLayout {
    pub fn new(robot: &RobotConfig, lookahead: usize, noise: &NoiseSpec) -> Self {
        let (j, h, nb) = (robot.num_joints, lookahead, robot.num_bodies());
        let mut actor = Vec::new();
        let mut offset = 0;
        let mut push = |groups: &mut Vec<Group>, name: &str, len: usize, noise: f64| {
            groups.push(Group {
                name: name.into(),
                offset,
                len,
                noise,
            });
            offset += len;
        };
        push(&mut actor, "gravity", 3, noise.gravity);
        push(&mut actor, "ang_vel", 3, noise.ang_vel);
        push(&mut actor, "joint_pos", j, noise.joint_pos);
        push(&mut actor, "joint_vel", j, noise.joint_vel);
        push(&mut actor, "prev_action", j, 0.0);
        push(&mut actor, "ref_gravity", 3 * h, noise.ref_gravity);
        push(&mut actor, "ref_lin_vel", 3 * h, noise.ref_lin_vel);
        push(&mut actor, "ref_ang_vel", 3 * h, noise.ref_ang_vel);
        push(&mut actor, "ref_joint_pos", j * h, noise.ref_joint_pos);
        push(&mut actor, "ref_height", h, noise.ref_height);
        let mut privileged = Vec::new();
        push(&mut privileged, "root_pos_diff", 3, 0.0);
        push(&mut privileged, "pitch_diff", 1, 0.0);
        push(&mut privileged, "ref_root_lin_vel", 3, 0.0);
        push(&mut privileged, "ref_root_ang_vel", 3, 0.0);
        push(&mut privileged, "ref_root_height", 1, 0.0);
        push(&mut privileged, "key_body_pos", 3 * nb, 0.0);
        push(&mut privileged, "root_lin_vel", 3, 0.0);
        Self {
            num_joints: j,
            num_bodies: nb,
            lookahead: h,
            actor,
            privileged,
        }
    }

    pub fn actor_dim(&self) -> usize {
        self.actor.last().map_or(0, |g| g.offset + g.len)
    }

    pub fn critic_dim(&self) -> usize {
        self.privileged.last().map_or(self.actor_dim(), |g| g.offset + g.len)
    }

    pub fn proprio_range(&self) -> std::ops::Range<usize> {
        0..self.group("ref_gravity").offset
    }

    pub fn reference_range(&self) -> std::ops::Range<usize> {
        self.group("ref_gravity").offset..self.actor_dim()
    }

    pub fn group(&self, name: &str) -> &Group {
        self.actor
            .iter()
            .chain(&self.privileged)
            .find(|g| g.name == name)
            .unwrap_or_else(|| panic!("no observation group {name}"))
    }

    /// SHA-256 of the JSON layout descriptor.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub clean: Vec<f64>,
    pub actor: Vec<f64>,
    pub critic: Vec<f64>,
}

/// Clean, noisy actor and critic observations for `state` against `clip`.
/// Noise is drawn only when `noisy` is set.
pub fn build_observation(
    robot: &RobotConfig,
    layout: &ObsLayout,
    state: &EnvState,
    clip: &MotionClip,
    noisy: bool,
    rng: &mut impl Rng,
) -> Result<Observation> {
    let t = state.frame;
    if t >= clip.len() {
        return Err(SimError::ClipExhausted {
            frame: t,
            len: clip.len(),
        });
    }
    let h = layout.lookahead;
    let mut clean = Vec::with_capacity(layout.critic_dim());
    clean.extend_from_slice(&state.gravity);
    clean.extend_from_slice(&state.ang_vel());
    clean.extend(state.q.iter().zip(&robot.q0).map(|(q, q0)| q - q0));
    clean.extend_from_slice(&state.qd);
    clean.extend_from_slice(&state.prev_action);
    let ahead: Vec<_> = (1..=h).map(|k| clip.frame(t + k)).collect();
    for f in &ahead {
        clean.extend_from_slice(&f.gravity);
    }
    for f in &ahead {
        clean.extend_from_slice(&to_body(f.pitch, f.root_vel));
    }
    for f in &ahead {
        clean.extend_from_slice(&[0.0, f.pitch_rate, 0.0]);
    }
    for f in &ahead {
        clean.extend_from_slice(&f.q);
    }
    for f in &ahead {
        clean.push(f.height);
    }
    debug_assert_eq!(clean.len(), layout.actor_dim());

    let mut actor = clean.clone();
    if noisy {
        for g in layout.actor.iter().filter(|g| g.noise > 0.0) {
            for v in &mut actor[g.offset..g.offset + g.len] {
                *v += rng.random_range(-g.noise..=g.noise);
            }
        }
    }

    let r = clip.frame(t);
    let mut critic = clean.clone();
    critic.extend_from_slice(&sub(state.root.pos, r.root_pos));
    critic.push(wrap_angle(state.root.pitch - r.pitch));
    critic.extend_from_slice(&r.root_vel);
    critic.extend_from_slice(&[0.0, r.pitch_rate, 0.0]);
    critic.push(r.height);
    for b in body_states(robot, &state.root, &state.q, &state.qd) {
        critic.extend_from_slice(&b.pos);
    }
    critic.extend_from_slice(&state.root.vel);
    debug_assert_eq!(critic.len(), layout.critic_dim());
    Ok(Observation {
        clean,
        actor,
        critic,
    })
}
