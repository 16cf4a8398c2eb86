use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weights of the auxiliary objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxWeights {
    pub vel: f64,
    pub contact: f64,
    pub ref_pos: f64,
    pub robot_pos: f64,
    pub dead: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            vel: 1e-2,
            contact: 1e-2,
            ref_pos: 1e-1,
            robot_pos: 1e-1,
            dead: 1e-1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Segments are split into this many groups per epoch.
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub adv_eps: f64,
    pub aux: AuxWeights,
    /// Steps per rollout segment (`T`).
    pub segment_len: usize,
    /// Parallel environments (`B`).
    pub num_envs: usize,
    /// Threads for environment stepping.
    pub workers: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.0,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 1.0,
            adv_eps: 1e-8,
            aux: AuxWeights::default(),
            segment_len: 32,
            num_envs: 16,
            workers: 1,
        }
    }
}

impl PpoConfig {
    /// Settings for the single-joint learning check.
    pub fn smoke() -> Self {
        Self {
            lr: 1e-3,
            num_envs: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("GAE lambda must lie in [0, 1]");
        }
        if self.clip <= 0.0 || self.lr <= 0.0 {
            return fail("clip range and learning rate must be positive");
        }
        if self.epochs == 0 || self.segment_len == 0 || self.num_envs == 0 {
            return fail("epochs, segment length and environment count must be positive");
        }
        if self.minibatches == 0 || self.minibatches > self.num_envs {
            return fail("minibatch count must lie in 1..=num_envs");
        }
        Ok(())
    }
}
