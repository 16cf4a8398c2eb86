use serde::{Deserialize, Serialize};

use crate::clip::MotionClip;
use crate::robot::{body_states, height_points, norm, sub, RobotConfig};
use crate::state::EnvState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gravity,
    Height,
    PelvisDrift,
    MaxLength,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Gravity => "gravity",
            Termination::Height => "height",
            Termination::PelvisDrift => "pelvis_drift",
            Termination::MaxLength => "max_length",
        }
    }

    /// Whether the episode ended by reaching the end of its clip.
    pub fn is_timeout(self) -> bool {
        self == Termination::MaxLength
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub gravity: f64,
    pub height: f64,
    pub pelvis: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            gravity: 0.8,
            height: 0.25,
            pelvis: 0.25,
        }
    }
}

pub struct Deviations {
    pub gravity: f64,
    pub height: f64,
    pub pelvis: f64,
}

pub fn deviations(cfg: &RobotConfig, state: &EnvState, clip: &MotionClip) -> Deviations {
    let f = clip.frame(state.frame);
    let root = f.root();
    let robot = body_states(cfg, &state.root, &state.q, &state.qd);
    let goal = body_states(cfg, &root, &f.q, &f.qd);
    let hp = height_points(cfg, &state.root, &robot, &state.q, &state.qd);
    let hg = height_points(cfg, &root, &goal, &f.q, &f.qd);
    Deviations {
        gravity: norm(sub(state.gravity, f.gravity)),
        height: hp
            .iter()
            .zip(&hg)
            .map(|(p, g)| (p[2] - g[2]).abs())
            .fold(0.0, f64::max),
        pelvis: norm(sub(state.root.pos, f.root_pos)),
    }
}

/// First rule that fires, in the order gravity, height, pelvis drift,
/// end of clip. Thresholds are strict.
pub fn check_termination(cfg: &RobotConfig, thr: &Thresholds, state: &EnvState, clip: &MotionClip) -> Option<Termination> {
    let d = deviations(cfg, state, clip);
    if d.gravity > thr.gravity {
        Some(Termination::Gravity)
    } else if d.height > thr.height {
        Some(Termination::Height)
    } else if d.pelvis > thr.pelvis {
        Some(Termination::PelvisDrift)
    } else if state.frame + 1 >= clip.len() {
        Some(Termination::MaxLength)
    } else {
        None
    }
}
