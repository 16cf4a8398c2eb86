#![allow(dead_code)]

pub mod reward_oracle;

use holosim::generate::{clip_from_trajectory, generate, GenSpec};
use holosim::robot::{body_states, projected_gravity, RootState};
use holosim::{ClipLibrary, EnvState, Frame, MotionClip, RobotConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn frame_at(cfg: &RobotConfig, root: RootState, q: Vec<f64>, qd: Vec<f64>) -> Frame {
    let bodies = body_states(cfg, &root, &q, &qd);
    Frame {
        root_pos: root.pos,
        pitch: root.pitch,
        root_vel: root.vel,
        pitch_rate: root.pitch_rate,
        key_pos: bodies.iter().map(|b| b.pos).collect(),
        gravity: projected_gravity(root.pitch),
        height: root.pos[2],
        contacts: [true, true],
        q,
        qd,
    }
}

pub fn random_root(r: &mut impl Rng, scale: f64) -> RootState {
    RootState {
        pos: [r.random_range(-scale..scale), r.random_range(-scale..scale) * 0.2, 0.8 + r.random_range(-scale..scale) * 0.2],
        pitch: r.random_range(-scale..scale) * 0.5,
        vel: [r.random_range(-scale..scale), r.random_range(-scale..scale), r.random_range(-scale..scale)],
        pitch_rate: r.random_range(-scale..scale),
    }
}

pub fn random_vec(r: &mut impl Rng, n: usize, half: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-half..half)).collect()
}

/// A robot state and a reference frame that disagree everywhere.
pub fn random_pair(cfg: &RobotConfig, r: &mut impl Rng) -> (EnvState, Frame) {
    let j = cfg.num_joints;
    let frame = frame_at(cfg, random_root(r, 0.5), random_vec(r, j, 1.0), random_vec(r, j, 1.0));
    let mut state = EnvState::from_frame(cfg, &frame, 0, 0);
    let root = random_root(r, 0.5);
    state.root = RootState {
        pos: [frame.root_pos[0] + root.pos[0] * 0.3, frame.root_pos[1] + root.pos[1], root.pos[2]],
        ..root
    };
    state.q = random_vec(r, j, 1.8);
    state.qd = random_vec(r, j, 2.0);
    state.qdd = random_vec(r, j, 200.0);
    state.gravity = projected_gravity(state.root.pitch);
    state.body_forces = (0..cfg.num_bodies())
        .map(|_| if r.random_bool(0.5) { r.random_range(0.0..3.0) } else { 0.0 })
        .collect();
    (state, frame)
}

/// A clip that holds one pose for `n` frames.
pub fn still_clip(cfg: &RobotConfig, n: usize) -> MotionClip {
    let qs = vec![cfg.q0.clone(); n];
    clip_from_trajectory(cfg, "hold", "test", 1.0 / cfg.dt, &vec![0.0; n], &qs)
}

pub fn sine_library(cfg: &RobotConfig, frames: usize, per_family: usize, seed: u64) -> ClipLibrary {
    generate(&GenSpec::mixed(frames, per_family), cfg, &mut rng(seed)).unwrap()
}
