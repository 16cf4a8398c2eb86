use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::MotionClip;
use crate::dynamics::{advance, joint_targets};
use crate::library::ClipLibrary;
use crate::obs::{build_observation, NoiseSpec, ObsLayout, Observation};
use crate::random::{sample_episode, sample_init, sample_push, DomainRandSpec, EpisodeParams};
use crate::reward::{compute_reward, RewardTerms, RewardWeights, CONTACT_FORCE_THRESHOLD};
use crate::robot::{body_states, projected_gravity, sub, to_body, RobotConfig};
use crate::state::EnvState;
use crate::termination::{check_termination, Termination, Thresholds};
use crate::{Result, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub robot: RobotConfig,
    pub lookahead: usize,
    pub noise_enabled: bool,
    pub noise: NoiseSpec,
    pub randomize: bool,
    pub randomization: DomainRandSpec,
    pub reward: RewardWeights,
    pub termination: Thresholds,
    /// Start episodes at a uniformly drawn clip frame instead of frame 0.
    pub random_start: bool,
}

impl EnvConfig {
    /// Noise, randomization, reward and termination at their default values.
    pub fn paper(num_joints: usize) -> Self {
        Self {
            robot: RobotConfig::biped(num_joints),
            lookahead: 10,
            noise_enabled: true,
            noise: NoiseSpec::paper(),
            randomize: true,
            randomization: DomainRandSpec::paper(),
            reward: RewardWeights::default(),
            termination: Thresholds::default(),
            random_start: true,
        }
    }

    /// Six joints, three per leg.
    pub fn desk() -> Self {
        Self::paper(6)
    }

    /// Two single-link legs with clean observations and nominal physics;
    /// episodes still start at random frames.
    pub fn smoke() -> Self {
        Self {
            noise_enabled: false,
            randomize: false,
            ..Self::paper(2)
        }
    }

    /// Deterministic variant: no noise, no randomization, start at frame 0.
    pub fn evaluation(&self) -> Self {
        Self {
            noise_enabled: false,
            randomize: false,
            random_start: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.noise.validate()?;
        self.randomization.validate()?;
        if self.lookahead == 0 {
            return Err(SimError::Config("lookahead must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("env config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terms: RewardTerms,
    pub termination: Option<Termination>,
}

/// Supervision for the auxiliary heads, from the exact simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxTargets {
    /// World-frame root linear velocity.
    pub base_vel: [f64; 3],
    /// One label per key body.
    pub contacts: Vec<f64>,
    /// Reference key-body positions in the reference root frame.
    pub ref_pos: Vec<f64>,
    /// Robot key-body positions in the robot root frame.
    pub robot_pos: Vec<f64>,
}

pub struct Env {
    cfg: Arc<EnvConfig>,
    lib: Arc<ClipLibrary>,
    layout: Arc<ObsLayout>,
    rng: ChaCha8Rng,
    state: EnvState,
    params: EpisodeParams,
    queue: VecDeque<Vec<f64>>,
    obs: Observation,
    time: f64,
    next_push: f64,
    done: bool,
}

impl Env {
    pub fn new(cfg: Arc<EnvConfig>, lib: Arc<ClipLibrary>, seed: u64) -> Result<Self> {
        Self::with_rng(cfg, lib, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(cfg: Arc<EnvConfig>, lib: Arc<ClipLibrary>, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if lib.num_joints() != cfg.robot.num_joints {
            return Err(SimError::Config(format!(
                "library clips have {} joints, robot has {}",
                lib.num_joints(),
                cfg.robot.num_joints
            )));
        }
        if let Some(c) = lib.clips().iter().find(|c| c.len() < cfg.lookahead + 2) {
            return Err(SimError::Clip {
                id: c.id.clone(),
                reason: format!("shorter than lookahead + 2 = {}", cfg.lookahead + 2),
            });
        }
        let layout = Arc::new(ObsLayout::new(&cfg.robot, cfg.lookahead, &cfg.noise));
        let clip = &lib.clips()[0];
        let state = EnvState::from_frame(&cfg.robot, &clip.frames[0], 0, 0);
        let params = sample_episode(&DomainRandSpec::nominal(), cfg.robot.num_joints, &mut ChaCha8Rng::seed_from_u64(0));
        let mut env = Self {
            obs: Observation {
                clean: vec![],
                actor: vec![],
                critic: vec![],
            },
            cfg,
            lib,
            layout,
            rng,
            state,
            params,
            queue: VecDeque::new(),
            time: 0.0,
            next_push: 0.0,
            done: false,
        };
        env.reset()?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ObsLayout> {
        &self.layout
    }

    pub fn library(&self) -> &Arc<ClipLibrary> {
        &self.lib
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn params(&self) -> &EpisodeParams {
        &self.params
    }

    pub fn clip(&self) -> &MotionClip {
        self.lib.get(self.state.clip)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// New episode on a sampled clip.
    pub fn reset(&mut self) -> Result<()> {
        let clip = self.lib.sample(&mut self.rng);
        let start = if self.cfg.random_start {
            self.rng.random_range(0..=self.lib.get(clip).len() - 2)
        } else {
            0
        };
        self.reset_to(clip, start)
    }

    pub fn reset_to(&mut self, clip: usize, start: usize) -> Result<()> {
        let c = self.lib.get(clip);
        if start + 1 >= c.len() {
            return Err(SimError::ClipExhausted {
                frame: start,
                len: c.len(),
            });
        }
        let robot = &self.cfg.robot;
        let j = robot.num_joints;
        let spec = if self.cfg.randomize {
            self.cfg.randomization.clone()
        } else {
            DomainRandSpec::nominal()
        };
        self.params = sample_episode(&spec, j, &mut self.rng);
        let mut state = EnvState::from_frame(robot, &c.frames[start], clip, start);
        if self.cfg.randomize {
            let p = sample_init(&spec, j, &mut self.rng);
            for k in 0..3 {
                state.root.pos[k] += p.root_pos[k];
                state.root.vel[k] += p.root_vel[k];
            }
            state.root.pitch += p.root_rot[1];
            for (q, d) in state.q.iter_mut().zip(&p.q) {
                *q += d;
            }
        }
        let lift = body_states(robot, &state.root, &state.q, &state.qd)
            .iter()
            .map(|b| self.params.terrain.height(b.pos[0], b.pos[1]) - b.pos[2])
            .fold(0.0, f64::max);
        state.root.pos[2] += lift;
        state.gravity = projected_gravity(state.root.pitch);
        self.state = state;
        self.queue = (0..self.params.action_delay).map(|_| vec![0.0; j]).collect();
        self.time = 0.0;
        self.next_push = spec.push_interval.sample(&mut self.rng);
        self.done = false;
        self.refresh_observation()
    }

    fn refresh_observation(&mut self) -> Result<()> {
        let clip = self.lib.get(self.state.clip);
        self.obs = build_observation(
            &self.cfg.robot,
            &self.layout,
            &self.state,
            clip,
            self.cfg.noise_enabled,
            &mut self.rng,
        )?;
        Ok(())
    }

    /// Replaces the simulated state, e.g. to place the robot on a frame.
    pub fn set_state(&mut self, state: EnvState) -> Result<()> {
        self.state = state;
        self.refresh_observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let robot = &self.cfg.robot;
        if action.len() != robot.num_joints || action.iter().any(|a| !a.is_finite()) {
            return Err(SimError::Action {
                expected: robot.num_joints,
                got: action.to_vec(),
            });
        }
        if self.done {
            return Err(SimError::ClipExhausted {
                frame: self.state.frame,
                len: self.clip().len(),
            });
        }
        self.queue.push_back(action.to_vec());
        let applied = self.queue.pop_front().expect("queue holds the new action");
        let target = joint_targets(robot, &self.params.q0_offset, &applied);
        advance(robot, &self.params, &target, &mut self.state);

        self.time += robot.dt;
        if self.cfg.randomize && self.time >= self.next_push {
            let (dv, dw) = sample_push(&self.cfg.randomization, &mut self.rng);
            for k in 0..3 {
                self.state.root.vel[k] += dv[k];
            }
            self.state.root.pitch_rate += dw[1];
            self.next_push += self.cfg.randomization.push_interval.sample(&mut self.rng);
        }

        self.state.frame += 1;
        self.state.step += 1;
        let clip = self.lib.get(self.state.clip);
        let frame = &clip.frames[self.state.frame];
        let (reward, terms) = compute_reward(
            robot,
            &self.cfg.reward,
            &self.state,
            frame,
            action,
            &self.state.prev_action,
        );
        self.state.prev_action = action.to_vec();
        let termination = check_termination(robot, &self.cfg.termination, &self.state, clip);
        self.done = termination.is_some();
        self.refresh_observation()?;
        Ok(StepOutcome {
            reward,
            terms,
            termination,
        })
    }

    pub fn aux_targets(&self) -> AuxTargets {
        let robot = &self.cfg.robot;
        let s = &self.state;
        let f = self.clip().frame(s.frame);
        let rb = body_states(robot, &s.root, &s.q, &s.qd);
        let gb = body_states(robot, &f.root(), &f.q, &f.qd);
        let feet = robot.feet();
        let contacts = (0..robot.num_bodies())
            .map(|b| {
                let on = match feet.iter().position(|&x| x == b) {
                    Some(k) => s.contacts[k],
                    None => s.body_forces[b] > CONTACT_FORCE_THRESHOLD,
                };
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        AuxTargets {
            base_vel: s.root.vel,
            contacts,
            ref_pos: gb
                .iter()
                .flat_map(|b| to_body(f.pitch, sub(b.pos, f.root_pos)))
                .collect(),
            robot_pos: rb
                .iter()
                .flat_map(|b| to_body(s.root.pitch, sub(b.pos, s.root.pos)))
                .collect(),
        }
    }
}

/// Independent environments sharing one read-only clip library.
pub struct VecEnv {
    envs: Vec<Env>,
    workers: usize,
}

impl VecEnv {
    /// Environment `i` draws from stream `i` of a generator seeded by `seed`.
    pub fn new(cfg: Arc<EnvConfig>, lib: Arc<ClipLibrary>, n: usize, seed: u64) -> Result<Self> {
        let envs = (0..n)
            .map(|i| Env::with_rng(cfg.clone(), lib.clone(), env_rng(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { envs, workers: 1 })
    }

    /// Worker threads used by [`VecEnv::step`]. Results do not depend on it.
    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn env(&self, i: usize) -> &Env {
        &self.envs[i]
    }

    pub fn env_mut(&mut self, i: usize) -> &mut Env {
        &mut self.envs[i]
    }

    pub fn envs_mut(&mut self) -> &mut [Env] {
        &mut self.envs
    }

    /// Reseeds every environment from `(seed, index)` and resets it.
    pub fn reseed_all(&mut self, seed: u64) -> Result<()> {
        for (i, e) in self.envs.iter_mut().enumerate() {
            e.rng = env_rng(seed, i);
            e.reset()?;
        }
        Ok(())
    }

    pub fn step(&mut self, actions: &[Vec<f64>]) -> Vec<Result<StepOutcome>> {
        assert_eq!(actions.len(), self.envs.len(), "one action per environment");
        if self.workers <= 1 || self.envs.len() <= 1 {
            return self.envs.iter_mut().zip(actions).map(|(e, a)| e.step(a)).collect();
        }
        let chunk = self.envs.len().div_ceil(self.workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .envs
                .chunks_mut(chunk)
                .zip(actions.chunks(chunk))
                .map(|(envs, acts)| {
                    scope.spawn(move || {
                        envs.iter_mut()
                            .zip(acts)
                            .map(|(e, a)| e.step(a))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("environment worker panicked"))
                .collect()
        })
    }
}

pub fn env_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}
