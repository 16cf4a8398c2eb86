//! Operator commands behind the `holomotion` binary: data generation and
//! packing, training runs, evaluation suites, benchmarks and rollout dumps.

pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use diffmath::Real;
use holomotion::evalbench::{eval_suite, EvalReport};
use holomotion::kvruntime::{step, KvCache};
use holomotion::policy::{Checkpoint, PolicyModel};
use holomotion::trainer::{IterationRecord, ProbeSpec, Trainer};
use holosim::generate::generate;
use holosim::{format, ClipLibrary, Env, RobotConfig};

pub use config::{resolve_output, DataSource, Precision, RunConfig, OUTPUT_ROOT_VAR};

/// Clips from a pack file or freshly generated for `robot`.
pub fn load_data(src: &DataSource, robot: &RobotConfig) -> Result<Arc<ClipLibrary>> {
    let lib = match (&src.library, &src.generate) {
        (Some(p), _) => format::load_library(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(spec)) => generate(spec, robot, &mut ChaCha8Rng::seed_from_u64(src.seed))?,
        (None, None) => bail!("data source names neither a library nor a generator"),
    };
    if lib.num_joints() != robot.num_joints {
        bail!("library has {} joints, robot has {}", lib.num_joints(), robot.num_joints);
    }
    Ok(Arc::new(lib))
}

pub fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:06}.ckpt"))
}

/// The resolved run configuration stored beside a checkpoint.
pub fn config_beside(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("toml")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub output: PathBuf,
    pub records: Vec<IterationRecord>,
    pub last_checkpoint: PathBuf,
}

fn append_line(w: &mut impl Write, v: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn save_checkpoint<T: Real>(tr: &Trainer<T>, cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let path = checkpoint_path(out, tr.iteration);
    fs::create_dir_all(path.parent().expect("checkpoint dir"))?;
    tr.checkpoint().save(&path)?;
    fs::write(config_beside(&path), cfg.to_toml_string()?)?;
    Ok(path)
}

fn train_with<T: Real>(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = cfg.resolved()?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let lib = load_data(&cfg.data, &cfg.env.robot)?;
    let eval_lib = match &cfg.eval_data {
        Some(d) if cfg.eval_every > 0 => Some(load_data(d, &cfg.env.robot)?),
        _ => None,
    };
    let mut tr = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if Some(&ck.config) != cfg.model.config.as_ref() {
                bail!("checkpoint {} was trained with a different model configuration", p.display());
            }
            Trainer::<T>::resume(&ck, cfg.ppo.clone(), cfg.env.clone(), lib.clone())?
        }
        None => Trainer::<T>::new(cfg.model_config()?, cfg.ppo.clone(), cfg.env.clone(), lib.clone(), cfg.seed)?,
    };
    tr.probe = cfg.probe.as_ref().map(|p| ProbeSpec::first_frames(&lib, p.episodes, p.seed, p.every));
    let open = |name: &str| -> Result<BufWriter<File>> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(out.join(name))?;
        Ok(BufWriter::new(f))
    };
    let mut metrics = open("metrics.jsonl")?;
    let mut timing = open("timing.jsonl")?;
    let mut records = Vec::new();
    let mut last = None;
    while tr.iteration < cfg.iterations {
        let (rec, time) = tr.iterate()?;
        append_line(&mut metrics, &rec)?;
        append_line(&mut timing, &time)?;
        metrics.flush()?;
        let it = rec.iteration;
        records.push(rec);
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            last = Some(save_checkpoint(&tr, &cfg, &out)?);
        }
        if let Some(lib) = &eval_lib {
            if it % cfg.eval_every == 0 {
                let model = tr.model.cast::<f64>();
                eval_suite(&model, &cfg.env, lib.clone(), cfg.ppo.workers)?.write(&out.join(format!("eval_{it:06}.jsonl")))?;
            }
        }
    }
    timing.flush()?;
    let last_checkpoint = match last {
        Some(p) if p == checkpoint_path(&out, tr.iteration) => p,
        _ => save_checkpoint(&tr, &cfg, &out)?,
    };
    Ok(TrainOutcome {
        output: out,
        records,
        last_checkpoint,
    })
}

/// Runs `cfg.iterations` collect/update cycles, writing the metrics log,
/// timings, checkpoints and resolved configuration under the output dir.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, resume),
        Precision::F64 => train_with::<f64>(cfg, resume),
    }
}

pub fn load_model(ckpt: &Path) -> Result<PolicyModel<f64>> {
    if !ckpt.is_file() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(ck.model(None)?)
}

/// Run configuration for a checkpoint: an explicit file, else the one
/// written beside it.
pub fn config_for(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let p = explicit.map(Path::to_path_buf).unwrap_or_else(|| config_beside(ckpt));
    RunConfig::load(&p)
}

/// Deterministic evaluation of a checkpoint on `data` (default: the
/// config's evaluation data, else its training data).
pub fn evaluate(ckpt: &Path, cfg: &RunConfig, data: Option<&DataSource>, workers: usize) -> Result<EvalReport> {
    let model = load_model(ckpt)?;
    let src = data.or(cfg.eval_data.as_ref()).unwrap_or(&cfg.data);
    let lib = load_data(src, &cfg.env.robot)?;
    Ok(eval_suite(&model, &cfg.env, lib, workers)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct RolloutStep {
    pub step: usize,
    pub frame: usize,
    pub root_pos: [f64; 3],
    pub pitch: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub ref_q: Vec<f64>,
    pub action: Vec<f64>,
    pub experts: Vec<Vec<usize>>,
    pub reward: f64,
    pub terms: Vec<(String, f64)>,
    pub termination: Option<String>,
}

/// Mean-action rollout of one clip under the evaluation environment.
pub fn rollout(ckpt: &Path, cfg: &RunConfig, clip: usize) -> Result<Vec<RolloutStep>> {
    let model = load_model(ckpt)?;
    let lib = load_data(cfg.eval_data.as_ref().unwrap_or(&cfg.data), &cfg.env.robot)?;
    if clip >= lib.len() {
        bail!("clip {clip} out of range, library holds {}", lib.len());
    }
    let mut env = Env::new(Arc::new(cfg.env.evaluation()), lib, cfg.seed)?;
    env.reset_to(clip, 0)?;
    let mut cache = KvCache::new(model.config());
    let mut steps = Vec::new();
    loop {
        let x = model.normalize_obs(&env.observation().actor);
        let out = step(&model, &mut cache, &x)?;
        let o = env.step(&out.mu)?;
        let s = env.state();
        steps.push(RolloutStep {
            step: steps.len(),
            frame: s.frame,
            root_pos: s.root.pos,
            pitch: s.root.pitch,
            q: s.q.clone(),
            qd: s.qd.clone(),
            ref_q: env.clip().frame(s.frame).q.clone(),
            action: out.mu,
            experts: out.decisions.iter().map(|d| d.experts.clone()).collect(),
            reward: o.reward,
            terms: o.terms.iter().map(|(k, v)| (k.to_string(), v)).collect(),
            termination: o.termination.map(|t| t.name().to_string()),
        });
        if o.termination.is_some() {
            return Ok(steps);
        }
    }
}
