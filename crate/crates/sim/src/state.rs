use crate::clip::Frame;
use crate::robot::{body_states, projected_gravity, BodyState, RobotConfig, RootState, Vec3};

/// Full simulated robot state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub root: RootState,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub gravity: Vec3,
    /// Left, right foot at or below the ground.
    pub contacts: [bool; 2],
    /// Normal contact force on each key body (N).
    pub body_forces: Vec<f64>,
    /// Control steps since reset.
    pub step: usize,
    pub clip: usize,
    /// Reference frame the state is compared against.
    pub frame: usize,
}

impl EnvState {
    /// Robot placed exactly on a reference frame, at rest in joint
    /// acceleration and with a zero previous action.
    pub fn from_frame(cfg: &RobotConfig, frame: &Frame, clip: usize, index: usize) -> Self {
        let j = cfg.num_joints;
        Self {
            root: frame.root(),
            q: frame.q.clone(),
            qd: frame.qd.clone(),
            qdd: vec![0.0; j],
            prev_action: vec![0.0; j],
            gravity: projected_gravity(frame.pitch),
            contacts: frame.contacts,
            body_forces: vec![0.0; cfg.num_bodies()],
            step: 0,
            clip,
            frame: index,
        }
    }

    pub fn bodies(&self, cfg: &RobotConfig) -> Vec<BodyState> {
        body_states(cfg, &self.root, &self.q, &self.qd)
    }

    pub fn ang_vel(&self) -> Vec3 {
        [0.0, self.root.pitch_rate, 0.0]
    }
}
