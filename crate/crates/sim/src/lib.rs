//! Reference motions and a planar humanoid tracking environment.
//!
//! The robot is a floating root with pitch and two serial legs. Joints are
//! PD-driven unit-inertia integrators; the root is carried by spring-damper
//! ground contacts. Rewards, terminations, observation noise and domain
//! randomization use the standard tracking settings.

pub mod clip;
pub mod dynamics;
pub mod env;
mod error;
pub mod format;
pub mod generate;
pub mod library;
pub mod obs;
pub mod random;
pub mod reward;
pub mod robot;
pub mod state;
pub mod terrain;
pub mod termination;

pub use clip::{Frame, MotionClip};
pub use env::{AuxTargets, Env, EnvConfig, StepOutcome, VecEnv};
pub use error::{Result, SimError};
pub use library::ClipLibrary;
pub use obs::{NoiseSpec, ObsLayout, Observation};
pub use random::{DomainRandSpec, EpisodeParams, Span};
pub use reward::{RewardTerms, RewardWeights};
pub use robot::RobotConfig;
pub use state::EnvState;
pub use termination::{Termination, Thresholds};

/// Shortest clip usable with the default ten-frame lookahead.
pub const MIN_CLIP_FRAMES: usize = 12;
