use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use holomotion::evalbench::{bench_inference, bench_training};
use holomotion::policy::{count_params, PolicyModel};
use holomotion_cli::{config_for, evaluate, resolve_output, rollout, train, DataSource, RunConfig};
use holosim::generate::{generate, GenSpec};
use holosim::{format, ClipLibrary, RobotConfig};

#[derive(Parser)]
#[command(name = "holomotion", version, about = "Motion-tracking policy toolkit")]
struct Cli {
    /// Overrides the seed of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate, pack or inspect motion clips.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a clip library.
    Eval(EvalArgs),
    /// Latency and throughput benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Dump per-step states of one mean-action rollout.
    Rollout(RolloutArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write a procedural library to a pack file.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// `mixed` or `single`.
        #[arg(long, default_value = "mixed")]
        preset: String,
        /// Generator spec (TOML); replaces the preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 6)]
        joints: usize,
        /// Also write every clip as a single-clip file into this directory.
        #[arg(long)]
        clips_dir: Option<PathBuf>,
    },
    /// Pack single-clip files into one library.
    Pack {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        clips: Vec<PathBuf>,
    },
    /// Summarize a clip or pack file.
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config is given: smoke, desk or paper.
    #[arg(long, default_value = "smoke")]
    preset: String,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to the one beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pack file to evaluate on instead of the configured data.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Report file; defaults to `eval.jsonl` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Cached step against full-window recompute.
    Inference {
        #[arg(long, default_value_t = 32)]
        context: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Model preset: desk or tiny.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Sequence-level update against the step-level oracle.
    Training {
        #[arg(long, default_value_t = 8)]
        envs: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        context: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Parameter accounting of a model preset.
    Params {
        #[arg(long, default_value = "paper")]
        preset: String,
    },
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (JSON lines); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(json: bool, value: &impl Serialize, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string(value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

fn write_library(lib: &ClipLibrary, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    format::pack_library(lib, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct LibrarySummary {
    clips: usize,
    joints: usize,
    frames: usize,
    sources: Vec<(String, usize)>,
    weights: std::collections::BTreeMap<String, f64>,
}

fn summarize(lib: &ClipLibrary) -> LibrarySummary {
    LibrarySummary {
        clips: lib.len(),
        joints: lib.num_joints(),
        frames: lib.clips().iter().map(|c| c.len()).sum(),
        sources: lib.sources().map(|s| (s.to_string(), lib.clips_of(s).len())).collect(),
        weights: lib.weights(),
    }
}

fn run_data(cmd: DataCmd, seed: u64, json: bool) -> Result<()> {
    match cmd {
        DataCmd::Gen {
            out,
            preset,
            spec,
            frames,
            count,
            joints,
            clips_dir,
        } => {
            let spec = match spec {
                Some(p) => toml::from_str::<GenSpec>(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => match preset.as_str() {
                    "mixed" => GenSpec::mixed(frames, count),
                    "single" => GenSpec::single_joint(frames, count, "single"),
                    other => bail!("unknown generator preset {other:?}"),
                },
            };
            let robot = RobotConfig::biped(joints);
            let lib = generate(&spec, &robot, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let out = resolve_output(&out);
            write_library(&lib, &out)?;
            if let Some(dir) = clips_dir {
                let dir = resolve_output(&dir);
                std::fs::create_dir_all(&dir)?;
                for c in lib.clips() {
                    format::write_clip(c, &dir.join(format!("{}.mclip", c.id)))?;
                }
            }
            let s = summarize(&lib);
            emit(json, &s, || format!("wrote {} clips ({} frames) to {}", s.clips, s.frames, out.display()))
        }
        DataCmd::Pack { out, clips } => {
            let clips = clips
                .iter()
                .map(|p| format::read_clip(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let lib = ClipLibrary::new(clips)?;
            let out = resolve_output(&out);
            write_library(&lib, &out)?;
            let s = summarize(&lib);
            emit(json, &s, || format!("packed {} clips into {}", s.clips, out.display()))
        }
        DataCmd::Inspect { file } => {
            let lib = match format::load_library(&file) {
                Ok(l) => l,
                Err(_) => ClipLibrary::new(vec![format::read_clip(&file).with_context(|| format!("reading {}", file.display()))?])?,
            };
            let s = summarize(&lib);
            emit(json, &s, || {
                let mut t = format!("{} clips, {} joints, {} frames\n", s.clips, s.joints, s.frames);
                for (src, n) in &s.sources {
                    t += &format!("  {src:12} {n:5} clips  weight {:.3}\n", s.weights[src]);
                }
                t.trim_end().to_string()
            })
        }
    }
}

fn run_train(a: TrainArgs, seed: Option<u64>, json: bool) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&a.preset)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(o) = a.output {
        cfg.output = o;
    }
    cfg.validate()?;
    if a.print_config {
        print!("{}", cfg.resolved()?.to_toml_string()?);
        return Ok(());
    }
    let outcome = train(&cfg, a.resume.as_deref())?;
    let last = outcome.records.last();
    #[derive(Serialize)]
    struct Done<'a> {
        output: &'a Path,
        checkpoint: &'a Path,
        iterations: usize,
        last_step_reward: Option<f64>,
        last_probe_return: Option<f64>,
    }
    let done = Done {
        output: &outcome.output,
        checkpoint: &outcome.last_checkpoint,
        iterations: outcome.records.len(),
        last_step_reward: last.map(|r| r.step_reward),
        last_probe_return: outcome.records.iter().rev().find_map(|r| r.probe_return),
    };
    emit(json, &done, || {
        format!(
            "trained {} iterations, checkpoint {}, metrics {}",
            done.iterations,
            done.checkpoint.display(),
            outcome.output.join("metrics.jsonl").display()
        )
    })
}

fn run_eval(a: EvalArgs, json: bool) -> Result<()> {
    if !a.checkpoint.is_file() {
        bail!("checkpoint {} does not exist", a.checkpoint.display());
    }
    let cfg = config_for(&a.checkpoint, a.config.as_deref())?;
    let data = a.library.map(|p| DataSource {
        library: Some(p),
        generate: None,
        seed: 0,
    });
    let report = evaluate(&a.checkpoint, &cfg, data.as_ref(), a.workers)?;
    let out = a.out.map(|p| resolve_output(&p)).unwrap_or_else(|| a.checkpoint.with_file_name("eval.jsonl"));
    report.write(&out)?;
    emit(json, &report, || {
        let mut t = format!("{:12} {:>6} {:>10} {:>10} {:>10} {:>7}\n", "source", "clips", "mpkpe_mm", "mpjpe_rad", "vel_mm", "sr_%");
        let row = |name: &str, s: &holomotion::evalbench::Summary| {
            format!(
                "{name:12} {:>6} {:>10.2} {:>10.4} {:>10.3} {:>7.2}\n",
                s.clips, s.mpkpe_mm, s.mpjpe_rad, s.vel_mm, s.success_rate
            )
        };
        for (k, s) in &report.per_source {
            t += &row(k, s);
        }
        t += &row("macro", &report.macro_avg);
        t += &row("micro", &report.micro_avg);
        t += &format!("report written to {}", out.display());
        t
    })
}

fn bench_model(preset: &str, context: usize, seed: u64) -> Result<PolicyModel<f32>> {
    let env = holosim::EnvConfig::desk();
    let dims = holomotion::trainer::interface_for(&env);
    let mut cfg = match preset {
        "desk" => holomotion::policy::ModelConfig::desk(dims),
        "tiny" => holomotion::policy::ModelConfig::tiny(dims),
        other => bail!("benchmarks support the desk and tiny presets, not {other:?}"),
    };
    cfg.context = context;
    cfg.seed = seed;
    Ok(PolicyModel::new(cfg)?)
}

fn run_bench(cmd: BenchCmd, seed: u64, json: bool) -> Result<()> {
    match cmd {
        BenchCmd::Inference { context, steps, preset } => {
            let model = bench_model(&preset, context, seed)?;
            let r = bench_inference(&model, steps, seed)?;
            emit(json, &r, || {
                format!(
                    "context {}  steps {}\n{:10} {:>10} {:>10} {:>10} {:>12}\n{:10} {:>10.1} {:>10.1} {:>10.1} {:>12.0}\n{:10} {:>10.1} {:>10.1} {:>10.1} {:>12.0}\nspeedup {:.2}x",
                    r.context, r.steps, "path", "mean_us", "p50_us", "p95_us", "flops",
                    "cached", r.cached.mean_us, r.cached.p50_us, r.cached.p95_us, r.cached.flops,
                    "full", r.full.mean_us, r.full.p50_us, r.full.p95_us, r.full.flops,
                    r.speedup
                )
            })
        }
        BenchCmd::Training {
            envs,
            steps,
            context,
            reps,
            preset,
        } => {
            let model = bench_model(&preset, context, seed)?;
            let r = bench_training(&model, envs, steps, reps, seed)?;
            emit(json, &r, || {
                format!(
                    "B {} T {} C {}\nsequence   {:.4}s  {:>9.0} steps/s  {} passes\nstep-level {:.4}s  {:>9.0} steps/s  {} passes\nspeedup {:.2}x",
                    r.envs, r.steps, r.context, r.sequence_s, r.sequence_rate, r.sequence_passes,
                    r.step_level_s, r.step_level_rate, r.step_level_passes, r.speedup
                )
            })
        }
        BenchCmd::Params { preset } => {
            let dims = holomotion::trainer::interface_for(&holosim::EnvConfig::desk());
            let cfg = match preset.as_str() {
                "paper" => holomotion::policy::ModelConfig::paper(dims),
                "desk" => holomotion::policy::ModelConfig::desk(dims),
                "tiny" => holomotion::policy::ModelConfig::tiny(dims),
                other => bail!("unknown model preset {other:?}"),
            };
            let c = count_params(&cfg);
            #[derive(Serialize)]
            struct P {
                total: usize,
                activated: usize,
                training_only: usize,
                activated_fraction: f64,
            }
            let p = P {
                total: c.total,
                activated: c.activated,
                training_only: c.training_only,
                activated_fraction: c.activated_fraction(),
            };
            emit(json, &p, || {
                format!(
                    "total {}  activated {}  ({:.2}%)  training-only {}",
                    p.total,
                    p.activated,
                    100.0 * p.activated_fraction,
                    p.training_only
                )
            })
        }
    }
}

fn run_rollout(a: RolloutArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = config_for(&a.checkpoint, a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let steps = rollout(&a.checkpoint, &cfg, a.clip)?;
    let mut text = String::new();
    for s in &steps {
        text += &serde_json::to_string(s)?;
        text.push('\n');
    }
    match a.out {
        Some(p) => {
            let p = resolve_output(&p);
            std::fs::write(&p, text)?;
            eprintln!("{} steps written to {}", steps.len(), p.display());
        }
        None => {
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let seed = cli.seed;
    let json = cli.json;
    let res = match cli.cmd {
        Cmd::Data(c) => run_data(c, seed.unwrap_or(0), json),
        Cmd::Train(a) => run_train(a, seed, json),
        Cmd::Eval(a) => run_eval(a, json),
        Cmd::Bench(c) => run_bench(c, seed.unwrap_or(0), json),
        Cmd::Rollout(a) => run_rollout(a, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
