//! Procedural reference motions.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{Frame, MotionClip};
use crate::library::ClipLibrary;
use crate::robot::{body_states, projected_gravity, RobotConfig, RootState};
use crate::{Result, SimError};

/// Feet within this height of the lowest foot count as in contact.
pub const CONTACT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    StandStill,
    /// Per-joint sinusoids shared by both legs, so the feet stay level.
    Sine { amplitude: f64, freq: [f64; 2] },
    /// Symmetric knee-like flexion.
    Crouch { depth: f64, freq: [f64; 2] },
    /// Root glides along a Catmull-Rom path through random waypoints.
    Spline { speed: f64, interval: f64 },
    /// A sine clip with uniform per-frame joint noise, emulating
    /// reconstruction artifacts.
    Jittered { amplitude: f64, freq: [f64; 2], noise: f64 },
    /// Only one joint moves.
    SingleJoint { joint: usize, amplitude: [f64; 2], freq: [f64; 2] },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::StandStill => "stand",
            Family::Sine { .. } => "sine",
            Family::Crouch { .. } => "crouch",
            Family::Spline { .. } => "spline",
            Family::Jittered { .. } => "jitter",
            Family::SingleJoint { .. } => "single",
        }
    }

    fn validate(&self, j: usize) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(format!("family {}: {m}", self.name())));
        let range = |r: [f64; 2], name: &str| -> Result<()> {
            if r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1] {
                Ok(())
            } else {
                bad(format!("{name} range {r:?}"))
            }
        };
        let nonneg = |x: f64, name: &str| -> Result<()> {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                bad(format!("{name} = {x}"))
            }
        };
        match *self {
            Family::StandStill => Ok(()),
            Family::Sine { amplitude, freq } | Family::Crouch { depth: amplitude, freq } => {
                nonneg(amplitude, "amplitude")?;
                range(freq, "freq")
            }
            Family::Spline { speed, interval } => {
                nonneg(speed, "speed")?;
                if interval > 0.0 {
                    Ok(())
                } else {
                    bad(format!("interval = {interval}"))
                }
            }
            Family::Jittered { amplitude, freq, noise } => {
                nonneg(amplitude, "amplitude")?;
                nonneg(noise, "noise")?;
                range(freq, "freq")
            }
            Family::SingleJoint { joint, amplitude, freq } => {
                if joint >= j {
                    return bad(format!("joint {joint} of {j}"));
                }
                range(amplitude, "amplitude")?;
                range(freq, "freq")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub source: String,
    pub count: usize,
    #[serde(default = "one")]
    pub weight: f64,
    pub family: Family,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub frames: usize,
    pub families: Vec<FamilySpec>,
}

impl GenSpec {
    /// One source per family.
    pub fn mixed(frames: usize, per_family: usize) -> Self {
        let fam = |source: &str, family| FamilySpec {
            source: source.into(),
            count: per_family,
            weight: 1.0,
            family,
        };
        Self {
            frames,
            families: vec![
                fam("stand", Family::StandStill),
                fam(
                    "sine",
                    Family::Sine {
                        amplitude: 0.35,
                        freq: [0.3, 0.6],
                    },
                ),
                fam(
                    "crouch",
                    Family::Crouch {
                        depth: 0.3,
                        freq: [0.25, 0.5],
                    },
                ),
                fam(
                    "spline",
                    Family::Spline {
                        speed: 0.3,
                        interval: 1.0,
                    },
                ),
                fam(
                    "video",
                    Family::Jittered {
                        amplitude: 0.3,
                        freq: [0.3, 0.6],
                        noise: 0.02,
                    },
                ),
            ],
        }
    }

    /// Sinusoid on joint 0 only.
    pub fn single_joint(frames: usize, count: usize, source: &str) -> Self {
        Self {
            frames,
            families: vec![FamilySpec {
                source: source.into(),
                count,
                weight: 1.0,
                family: Family::SingleJoint {
                    joint: 0,
                    amplitude: [0.2, 0.4],
                    freq: [0.4, 0.8],
                },
            }],
        }
    }

    pub fn validate(&self, robot: &RobotConfig, min_frames: usize) -> Result<()> {
        if self.frames < min_frames {
            return Err(SimError::Config(format!(
                "{} frames per clip, need at least {min_frames}",
                self.frames
            )));
        }
        if self.families.is_empty() {
            return Err(SimError::Config("no families".into()));
        }
        for f in &self.families {
            if f.count == 0 || f.source.is_empty() || !(f.weight > 0.0 && f.weight.is_finite()) {
                return Err(SimError::Config(format!(
                    "family {} needs a source, a positive count and a positive weight",
                    f.family.name()
                )));
            }
            f.family.validate(robot.num_joints)?;
        }
        Ok(())
    }
}

pub fn generate(spec: &GenSpec, robot: &RobotConfig, rng: &mut impl Rng) -> Result<ClipLibrary> {
    robot.validate()?;
    spec.validate(robot, crate::MIN_CLIP_FRAMES)?;
    let fps = 1.0 / robot.dt;
    let mut clips = Vec::new();
    let mut weights = std::collections::BTreeMap::new();
    for fs in &spec.families {
        weights.insert(fs.source.clone(), fs.weight);
        for i in 0..fs.count {
            let id = format!("{}-{}-{i:04}", fs.source, fs.family.name());
            clips.push(family_clip(&fs.family, robot, spec.frames, fps, &id, &fs.source, rng));
        }
    }
    ClipLibrary::with_weights(clips, weights)
}

fn family_clip(
    family: &Family,
    robot: &RobotConfig,
    n: usize,
    fps: f64,
    id: &str,
    source: &str,
    rng: &mut impl Rng,
) -> MotionClip {
    let j = robot.num_joints;
    let dt = 1.0 / fps;
    let times: Vec<f64> = (0..n).map(|t| t as f64 * dt).collect();
    let mut xs = vec![0.0; n];
    let qs: Vec<Vec<f64>> = match *family {
        Family::StandStill => vec![robot.q0.clone(); n],
        Family::Sine { amplitude, freq } => sine_waves(robot, &times, amplitude, freq, rng),
        Family::Crouch { depth, freq } => {
            let f = uniform(rng, freq);
            let pattern = crouch_pattern(robot);
            times
                .iter()
                .map(|&t| {
                    let c = 0.5 * (1.0 - (TAU * f * t).cos());
                    (0..j).map(|k| robot.q0[k] + depth * pattern[k] * c).collect()
                })
                .collect()
        }
        Family::Spline { speed, interval } => {
            let count = (times[n - 1] / interval).ceil() as usize + 2;
            let mut way = vec![0.0];
            for _ in 1..count {
                let last = *way.last().unwrap();
                way.push(last + rng.random_range(-speed..=speed) * interval);
            }
            for (x, &t) in xs.iter_mut().zip(&times) {
                *x = catmull_rom(&way, t / interval);
            }
            vec![robot.q0.clone(); n]
        }
        Family::Jittered { amplitude, freq, noise } => {
            let base = sine_waves(robot, &times, amplitude, freq, rng);
            jitter_joints(&base, noise, rng)
        }
        Family::SingleJoint {
            joint,
            amplitude,
            freq,
        } => {
            let a = uniform(rng, amplitude);
            let f = uniform(rng, freq);
            let ph = rng.random_range(0.0..TAU);
            times
                .iter()
                .map(|&t| {
                    let mut q = robot.q0.clone();
                    q[joint] += a * (TAU * f * t + ph).sin();
                    q
                })
                .collect()
        }
    };
    clip_from_trajectory(robot, id, source, fps, &xs, &qs)
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sine_waves(robot: &RobotConfig, times: &[f64], amplitude: f64, freq: [f64; 2], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let f = uniform(rng, freq);
    let per_leg = robot.left_joints().len();
    let waves: Vec<(f64, f64)> = (0..per_leg)
        .map(|_| (uniform(rng, [0.0, amplitude]), rng.random_range(0.0..TAU)))
        .collect();
    let [(left, _), (right, _)] = robot.legs();
    times
        .iter()
        .map(|&t| {
            let mut q = robot.q0.clone();
            for (i, k) in left.clone().enumerate() {
                q[k] += waves[i].0 * (TAU * f * t + waves[i].1).sin();
            }
            for (i, k) in right.clone().enumerate() {
                q[k] += waves[i].0 * (TAU * f * t + waves[i].1).sin();
            }
            q
        })
        .collect()
}

fn crouch_pattern(robot: &RobotConfig) -> Vec<f64> {
    let mut p = vec![0.0; robot.num_joints];
    for (joints, _) in robot.legs() {
        let n = joints.len();
        for (i, k) in joints.enumerate() {
            p[k] = match (n, i) {
                (1, _) => 1.0,
                (2, 0) => 1.0,
                (2, 1) => -2.0,
                (_, 0) => 1.0,
                (_, 1) => -2.0,
                (_, 2) => 1.0,
                _ => 0.0,
            };
        }
    }
    p
}

fn catmull_rom(points: &[f64], s: f64) -> f64 {
    let last = points.len() - 1;
    let i = (s.floor() as usize).min(last.saturating_sub(1));
    let u = s - i as f64;
    let p = |k: isize| points[k.clamp(0, last as isize) as usize];
    let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
}

fn jitter_joints(qs: &[Vec<f64>], noise: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    qs.iter()
        .map(|q| {
            q.iter()
                .map(|&v| if noise > 0.0 { v + rng.random_range(-noise..=noise) } else { v })
                .collect()
        })
        .collect()
}

/// Copy of `clip` with uniform joint noise of half-width `noise`, and all
/// derived quantities recomputed.
pub fn jitter(clip: &MotionClip, robot: &RobotConfig, noise: f64, rng: &mut impl Rng) -> MotionClip {
    let qs: Vec<Vec<f64>> = clip.frames.iter().map(|f| f.q.clone()).collect();
    let xs: Vec<f64> = clip.frames.iter().map(|f| f.root_pos[0]).collect();
    let noisy = jitter_joints(&qs, noise, rng);
    clip_from_trajectory(robot, &clip.id, &clip.source, clip.fps, &xs, &noisy)
}

fn central_diff(values: &[f64], dt: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|t| match t {
            0 => (values[1] - values[0]) / dt,
            _ if t == n - 1 => (values[n - 1] - values[n - 2]) / dt,
            _ => (values[t + 1] - values[t - 1]) / (2.0 * dt),
        })
        .collect()
}

/// Builds a clip on flat ground from root `x` and joint angles: the root
/// sits so the lowest foot touches `z = 0`; velocities are central
/// differences.
pub fn clip_from_trajectory(
    robot: &RobotConfig,
    id: &str,
    source: &str,
    fps: f64,
    xs: &[f64],
    qs: &[Vec<f64>],
) -> MotionClip {
    let n = xs.len();
    let dt = 1.0 / fps;
    let j = robot.num_joints;
    let zero = vec![0.0; j];
    let feet = robot.feet();
    let mut zs = Vec::with_capacity(n);
    let mut contacts = Vec::with_capacity(n);
    for (x, q) in xs.iter().zip(qs) {
        let root = RootState {
            pos: [*x, 0.0, 0.0],
            ..Default::default()
        };
        let b = body_states(robot, &root, q, &zero);
        let fz = [b[feet[0]].pos[2], b[feet[1]].pos[2]];
        let low = fz[0].min(fz[1]);
        zs.push(-low);
        contacts.push([fz[0] - low <= CONTACT_TOLERANCE, fz[1] - low <= CONTACT_TOLERANCE]);
    }
    let vx = central_diff(xs, dt);
    let vz = central_diff(&zs, dt);
    let qd_cols: Vec<Vec<f64>> = (0..j)
        .map(|k| central_diff(&qs.iter().map(|q| q[k]).collect::<Vec<_>>(), dt))
        .collect();
    let frames = (0..n)
        .map(|t| {
            let root = RootState {
                pos: [xs[t], 0.0, zs[t]],
                pitch: 0.0,
                vel: [vx[t], 0.0, vz[t]],
                pitch_rate: 0.0,
            };
            let qd: Vec<f64> = (0..j).map(|k| qd_cols[k][t]).collect();
            let bodies = body_states(robot, &root, &qs[t], &qd);
            Frame {
                root_pos: root.pos,
                pitch: 0.0,
                root_vel: root.vel,
                pitch_rate: 0.0,
                q: qs[t].clone(),
                qd,
                key_pos: bodies.iter().map(|b| b.pos).collect(),
                gravity: projected_gravity(0.0),
                height: zs[t],
                contacts: contacts[t],
            }
        })
        .collect();
    MotionClip {
        id: id.into(),
        source: source.into(),
        fps,
        num_joints: j,
        frames,
    }
}
