use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use diffmath::Real;
use holosim::robot::{body_states, Vec3};
use holosim::{ClipLibrary, Env, EnvConfig, Termination};

use crate::kvruntime::{step, KvCache};
use crate::policy::PolicyModel;
use crate::Result;

/// Robot and reference quantities compared at one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub robot_key: Vec<Vec3>,
    pub ref_key: Vec<Vec3>,
    pub robot_q: Vec<f64>,
    pub ref_q: Vec<f64>,
    pub robot_vel: Vec3,
    pub ref_vel: Vec3,
    pub robot_height: f64,
    pub ref_height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub source: String,
    pub frames: usize,
    /// Mean key-body world position error (mm).
    pub mpkpe_mm: f64,
    /// Mean absolute joint angle error (rad).
    pub mpjpe_rad: f64,
    /// Mean root velocity error expressed as displacement per frame (mm).
    pub vel_mm: f64,
    pub success: bool,
    pub termination: Option<String>,
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-clip metrics from recorded samples. Success needs the episode to
/// reach the clip end and the root height to stay within `height_tol`.
pub fn clip_metrics(
    clip: &str,
    source: &str,
    samples: &[FrameSample],
    termination: Option<Termination>,
    dt: f64,
    height_tol: f64,
) -> ClipMetrics {
    let n = samples.len().max(1) as f64;
    let mut kp = 0.0;
    let mut jp = 0.0;
    let mut vel = 0.0;
    let mut within = true;
    for s in samples {
        let k = s.robot_key.len().max(1) as f64;
        kp += s.robot_key.iter().zip(&s.ref_key).map(|(&a, &b)| dist(a, b)).sum::<f64>() / k;
        let j = s.robot_q.len().max(1) as f64;
        jp += s.robot_q.iter().zip(&s.ref_q).map(|(a, b)| (a - b).abs()).sum::<f64>() / j;
        vel += dist(s.robot_vel, s.ref_vel) * dt;
        within &= (s.robot_height - s.ref_height).abs() <= height_tol;
    }
    let early = termination.is_some_and(|t| !t.is_timeout());
    ClipMetrics {
        clip: clip.to_string(),
        source: source.to_string(),
        frames: samples.len(),
        mpkpe_mm: 1000.0 * kp / n,
        mpjpe_rad: jp / n,
        vel_mm: 1000.0 * vel / n,
        success: within && !early,
        termination: termination.map(|t| t.name().to_string()),
    }
}

fn sample(env: &Env) -> FrameSample {
    let cfg = &env.config().robot;
    let s = env.state();
    let f = env.clip().frame(s.frame);
    let robot = body_states(cfg, &s.root, &s.q, &s.qd);
    FrameSample {
        robot_key: robot.iter().map(|b| b.pos).collect(),
        ref_key: f.key_pos.clone(),
        robot_q: s.q.clone(),
        ref_q: f.q.clone(),
        robot_vel: s.root.vel,
        ref_vel: f.root_vel,
        robot_height: s.root.pos[2],
        ref_height: f.root_pos[2],
    }
}

/// Rolls the mean action from frame 0 to the clip end or an early
/// termination. `env` should be an evaluation configuration; statistics
/// and parameters are only read.
pub fn eval_clip<T: Real>(model: &PolicyModel<T>, env: Arc<EnvConfig>, lib: Arc<ClipLibrary>, clip: usize) -> Result<ClipMetrics> {
    let height_tol = env.termination.height;
    let dt = env.robot.dt;
    let mut e = Env::new(env, lib.clone(), clip as u64)?;
    e.reset_to(clip, 0)?;
    let mut cache = KvCache::new(model.config());
    let mut samples = Vec::new();
    let termination = loop {
        let x = model.normalize_obs(&e.observation().actor);
        let out = step(model, &mut cache, &x)?;
        let o = e.step(&out.mu)?;
        samples.push(sample(&e));
        if let Some(t) = o.termination {
            break Some(t);
        }
    };
    let c = lib.get(clip);
    Ok(clip_metrics(&c.id, &c.source, &samples, termination, dt, height_tol))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clips: usize,
    pub mpkpe_mm: f64,
    pub mpjpe_rad: f64,
    pub vel_mm: f64,
    /// Percentage of successful clips.
    pub success_rate: f64,
}

impl Summary {
    pub fn of(clips: &[&ClipMetrics]) -> Self {
        let n = clips.len().max(1) as f64;
        Self {
            clips: clips.len(),
            mpkpe_mm: clips.iter().map(|c| c.mpkpe_mm).sum::<f64>() / n,
            mpjpe_rad: clips.iter().map(|c| c.mpjpe_rad).sum::<f64>() / n,
            vel_mm: clips.iter().map(|c| c.vel_mm).sum::<f64>() / n,
            success_rate: 100.0 * clips.iter().filter(|c| c.success).count() as f64 / n,
        }
    }

    /// Unweighted mean of summaries.
    pub fn mean(parts: &[Summary]) -> Self {
        let n = parts.len().max(1) as f64;
        Self {
            clips: parts.iter().map(|p| p.clips).sum(),
            mpkpe_mm: parts.iter().map(|p| p.mpkpe_mm).sum::<f64>() / n,
            mpjpe_rad: parts.iter().map(|p| p.mpjpe_rad).sum::<f64>() / n,
            vel_mm: parts.iter().map(|p| p.vel_mm).sum::<f64>() / n,
            success_rate: parts.iter().map(|p| p.success_rate).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub per_source: BTreeMap<String, Summary>,
    /// Mean of per-source means.
    pub macro_avg: Summary,
    /// Mean over all clips.
    pub micro_avg: Summary,
}

impl EvalReport {
    pub fn from_clips(clips: Vec<ClipMetrics>) -> Self {
        let mut groups: BTreeMap<String, Vec<&ClipMetrics>> = BTreeMap::new();
        for c in &clips {
            groups.entry(c.source.clone()).or_default().push(c);
        }
        let per_source: BTreeMap<String, Summary> = groups.iter().map(|(k, v)| (k.clone(), Summary::of(v))).collect();
        let macro_avg = Summary::mean(&per_source.values().cloned().collect::<Vec<_>>());
        let micro_avg = Summary::of(&clips.iter().collect::<Vec<_>>());
        Self {
            clips,
            per_source,
            macro_avg,
            micro_avg,
        }
    }

    /// One JSON record per clip, per source, then the summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.clips {
            out += &serde_json::to_string(&serde_json::json!({ "kind": "clip", "record": c }))?;
            out.push('\n');
        }
        for (s, sum) in &self.per_source {
            out += &serde_json::to_string(&serde_json::json!({ "kind": "source", "source": s, "record": sum }))?;
            out.push('\n');
        }
        out += &serde_json::to_string(&serde_json::json!({
            "kind": "summary",
            "macro": self.macro_avg,
            "micro": self.micro_avg,
        }))?;
        out.push('\n');
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

/// Evaluates every clip of `lib` under `env.evaluation()`, spread over
/// `workers` threads.
pub fn eval_suite<T: Real>(model: &PolicyModel<T>, env: &EnvConfig, lib: Arc<ClipLibrary>, workers: usize) -> Result<EvalReport> {
    let env = Arc::new(env.evaluation());
    let n = lib.len();
    let workers = workers.clamp(1, n.max(1));
    let results: Vec<Result<ClipMetrics>> = if workers == 1 {
        (0..n).map(|k| eval_clip(model, env.clone(), lib.clone(), k)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (env, lib) = (env.clone(), lib.clone());
                    s.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|k| (k, eval_clip(model, env.clone(), lib.clone(), k)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut all: Vec<_> = handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect();
            all.sort_by_key(|(k, _)| *k);
            all.into_iter().map(|(_, r)| r).collect()
        })
    };
    Ok(EvalReport::from_clips(results.into_iter().collect::<Result<Vec<_>>>()?))
}
