use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use holomotion::policy::ModelConfig;
use holomotion::trainer::{interface_for, PpoConfig};
use holosim::generate::GenSpec;
use holosim::EnvConfig;

/// Environment variable naming the root for relative output paths.
pub const OUTPUT_ROOT_VAR: &str = "HOLOMOTION_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Where clips come from: a packed library or a generator spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub library: Option<PathBuf>,
    pub generate: Option<GenSpec>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `paper`, `desk` or `tiny`; ignored once `config` is present.
    pub preset: String,
    pub config: Option<ModelConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub episodes: usize,
    pub every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub iterations: usize,
    /// Write a checkpoint every this many iterations (0: only the last).
    pub checkpoint_every: usize,
    /// Evaluate on `eval_data` every this many iterations (0: never).
    pub eval_every: usize,
    pub precision: Precision,
    pub data: DataSource,
    pub eval_data: Option<DataSource>,
    pub probe: Option<ProbeSection>,
    pub env: EnvConfig,
    pub model: ModelSection,
    pub ppo: PpoConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |env: EnvConfig, data: GenSpec, model: &str| Self {
            seed: 0,
            output: PathBuf::from(format!("runs/{name}")),
            iterations: 1000,
            checkpoint_every: 100,
            eval_every: 0,
            precision: Precision::F32,
            data: DataSource {
                library: None,
                generate: Some(data),
                seed: 0,
            },
            eval_data: None,
            probe: None,
            env,
            model: ModelSection {
                preset: model.into(),
                config: None,
            },
            ppo: PpoConfig::default(),
        };
        Ok(match name {
            "smoke" => Self {
                iterations: 200,
                checkpoint_every: 0,
                eval_data: Some(DataSource {
                    library: None,
                    generate: Some(GenSpec::single_joint(100, 32, "heldout")),
                    seed: 1_000_003,
                }),
                probe: Some(ProbeSection {
                    episodes: 8,
                    every: 10,
                    seed: 99,
                }),
                ppo: PpoConfig::smoke(),
                ..base(EnvConfig::smoke(), GenSpec::single_joint(100, 32, "single"), "desk")
            },
            "desk" => Self {
                eval_data: Some(DataSource {
                    library: None,
                    generate: Some(GenSpec::mixed(200, 4)),
                    seed: 1_000_003,
                }),
                ..base(EnvConfig::desk(), GenSpec::mixed(200, 8), "desk")
            },
            "paper" => base(EnvConfig::desk(), GenSpec::mixed(200, 8), "paper"),
            other => bail!("unknown preset {other:?} (expected smoke, desk or paper)"),
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&s).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        if self.data.library.is_none() && self.data.generate.is_none() {
            bail!("data needs a library path or a generate spec");
        }
        if let Some(p) = &self.probe {
            if p.episodes == 0 {
                bail!("probe needs at least one episode");
            }
        }
        self.model_config()?;
        Ok(())
    }

    /// Model configuration for this environment; presets take the run seed.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let dims = interface_for(&self.env);
        let cfg = match &self.model.config {
            Some(c) => {
                if c.dims != dims {
                    bail!("model interface {:?} does not match the environment {:?}", c.dims, dims);
                }
                c.clone()
            }
            None => {
                let mut c = match self.model.preset.as_str() {
                    "paper" => ModelConfig::paper(dims),
                    "desk" => ModelConfig::desk(dims),
                    "tiny" => ModelConfig::tiny(dims),
                    other => bail!("unknown model preset {other:?}"),
                };
                c.seed = self.seed;
                c
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with the model spelled out, so it no longer depends on presets.
    pub fn resolved(&self) -> Result<Self> {
        let mut r = self.clone();
        r.model.config = Some(self.model_config()?);
        Ok(r)
    }

    /// `output`, placed under the output-root variable when relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output)
    }
}

pub fn resolve_output(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
