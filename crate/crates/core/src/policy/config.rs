use holosim::ObsLayout;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sizes fixed by the environment rather than the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterfaceDims {
    pub obs_dim: usize,
    pub critic_dim: usize,
    /// Reference-feature slice of the actor observation read by the router.
    pub ref_offset: usize,
    pub ref_len: usize,
    pub action_dim: usize,
    /// Bodies with contact labels (`K_c`).
    pub contact_bodies: usize,
    /// Bodies with position targets (`K_p`).
    pub pos_bodies: usize,
}

impl InterfaceDims {
    pub fn from_layout(layout: &ObsLayout) -> Self {
        let r = layout.reference_range();
        Self {
            obs_dim: layout.actor_dim(),
            critic_dim: layout.critic_dim(),
            ref_offset: r.start,
            ref_len: r.len(),
            action_dim: layout.num_joints,
            contact_bodies: layout.num_bodies,
            pos_bodies: layout.num_bodies,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: InterfaceDims,
    pub d_model: usize,
    /// Attention window `C`, also the KV ring capacity.
    pub context: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub blocks: usize,
    pub experts: usize,
    pub top_k: usize,
    pub shared_expert: bool,
    pub expert_hidden: usize,
    pub tokenizer_hidden: usize,
    pub head_hidden: usize,
    pub critic_hidden: usize,
    pub ema_decay: f64,
    pub norm_eps: f64,
    pub log_std_init: f64,
    pub seed: u64,
}

/// Bounds applied to the state-independent action log-std.
pub const ACTION_LOG_STD: (f64, f64) = (-5.0, 1.0);
/// Bounds on the predicted velocity standard deviation.
pub const VEL_STD: (f64, f64) = (1e-3, 10.0);

impl ModelConfig {
    /// d = 512, C = 32, 8 query and 4 KV heads, one block with 1024 experts, top-2.
    pub fn paper(dims: InterfaceDims) -> Self {
        Self {
            dims,
            d_model: 512,
            context: 32,
            heads: 8,
            kv_heads: 4,
            blocks: 1,
            experts: 1024,
            top_k: 2,
            shared_expert: true,
            expert_hidden: 384,
            tokenizer_hidden: 512,
            head_hidden: 512,
            critic_hidden: 512,
            ema_decay: 0.999,
            norm_eps: 1e-6,
            log_std_init: 0.0,
            seed: 0,
        }
    }

    pub fn desk(dims: InterfaceDims) -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            experts: 16,
            heads: 4,
            kv_heads: 2,
            expert_hidden: 64,
            tokenizer_hidden: 64,
            head_hidden: 64,
            critic_hidden: 128,
            ..Self::paper(dims)
        }
    }

    pub fn tiny(dims: InterfaceDims) -> Self {
        Self {
            d_model: 16,
            context: 4,
            blocks: 1,
            experts: 4,
            heads: 2,
            kv_heads: 1,
            expert_hidden: 8,
            tokenizer_hidden: 16,
            head_hidden: 16,
            critic_hidden: 16,
            ..Self::paper(dims)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let d = &self.dims;
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return fail(format!("{} query heads cannot share {} KV heads", self.heads, self.kv_heads));
        }
        if self.d_model % self.heads != 0 || self.head_dim() % 2 != 0 {
            return fail(format!("d_model {} does not split into even-width heads", self.d_model));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top-k {} with {} experts", self.top_k, self.experts));
        }
        if self.context == 0 || self.blocks == 0 {
            return fail("context and block count must be positive".into());
        }
        if d.ref_len == 0 || d.ref_offset + d.ref_len > d.obs_dim {
            return fail("reference slice lies outside the observation".into());
        }
        if d.action_dim == 0 || d.critic_dim == 0 {
            return fail("empty action or critic input".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("EMA decay {} outside [0, 1)", self.ema_decay));
        }
        Ok(())
    }
}

/// Role of a parameter tensor, for activated-parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Used for every token at deployment.
    Dense,
    /// Routed expert `expert` of MoE layer `block`.
    Expert { block: usize, expert: usize },
    /// Training-only: auxiliary heads and critic.
    Training,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: Role,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `±gain / sqrt(rows)`.
    Uniform(f64),
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn push_linear(out: &mut Vec<ParamSpec>, name: &str, i: usize, o: usize, role: Role, gain: f64) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        rows: i,
        cols: o,
        role,
        init: Init::Uniform(gain),
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        rows: 1,
        cols: o,
        role,
        init: Init::Zeros,
    });
}

fn push_gain(out: &mut Vec<ParamSpec>, name: String, n: usize, role: Role) {
    out.push(ParamSpec {
        name,
        rows: 1,
        cols: n,
        role,
        init: Init::Ones,
    });
}

fn push_matrix(out: &mut Vec<ParamSpec>, name: String, i: usize, o: usize, role: Role) {
    out.push(ParamSpec {
        name,
        rows: i,
        cols: o,
        role,
        init: Init::Uniform(1.0),
    });
}

/// Every parameter tensor of the model, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let dims = &cfg.dims;
    let hd = cfg.head_dim();
    let mut out = Vec::new();
    push_linear(&mut out, "tok.l1", dims.obs_dim, cfg.tokenizer_hidden, Role::Dense, 1.0);
    push_linear(&mut out, "tok.l2", cfg.tokenizer_hidden, d, Role::Dense, 1.0);
    for l in 0..cfg.blocks {
        let p = format!("block{l}");
        push_gain(&mut out, format!("{p}.attn_norm"), d, Role::Dense);
        push_matrix(&mut out, format!("{p}.wq"), d, cfg.heads * hd, Role::Dense);
        push_matrix(&mut out, format!("{p}.wk"), d, cfg.kv_dim(), Role::Dense);
        push_matrix(&mut out, format!("{p}.wv"), d, cfg.kv_dim(), Role::Dense);
        push_gain(&mut out, format!("{p}.q_norm"), hd, Role::Dense);
        push_gain(&mut out, format!("{p}.k_norm"), hd, Role::Dense);
        push_linear(&mut out, &format!("{p}.gate"), d, cfg.heads * hd, Role::Dense, 1.0);
        push_matrix(&mut out, format!("{p}.wo"), cfg.heads * hd, d, Role::Dense);
        push_gain(&mut out, format!("{p}.moe_norm"), d, Role::Dense);
        push_linear(&mut out, &format!("{p}.router"), dims.ref_len, cfg.experts, Role::Dense, 1.0);
        if cfg.shared_expert {
            push_linear(&mut out, &format!("{p}.shared.l1"), d, cfg.expert_hidden, Role::Dense, 1.0);
            push_linear(&mut out, &format!("{p}.shared.l2"), cfg.expert_hidden, d, Role::Dense, 1.0);
        }
        for e in 0..cfg.experts {
            let role = Role::Expert { block: l, expert: e };
            push_linear(&mut out, &format!("{p}.expert{e}.l1"), d, cfg.expert_hidden, role, 1.0);
            push_linear(&mut out, &format!("{p}.expert{e}.l2"), cfg.expert_hidden, d, role, 1.0);
        }
    }
    push_gain(&mut out, "final_norm".into(), d, Role::Dense);
    push_linear(&mut out, "head.l1", d, cfg.head_hidden, Role::Dense, 1.0);
    push_linear(&mut out, "head.l2", cfg.head_hidden, dims.action_dim, Role::Dense, 0.01);
    out.push(ParamSpec {
        name: "log_std".into(),
        rows: 1,
        cols: dims.action_dim,
        role: Role::Dense,
        init: Init::Constant(cfg.log_std_init),
    });
    let t = Role::Training;
    push_gain(&mut out, "aux.norm".into(), d, t);
    push_linear(&mut out, "aux.vel_mu", d, 3, t, 1.0);
    push_linear(&mut out, "aux.vel_log_std", d, 3, t, 0.1);
    push_linear(&mut out, "aux.contact", d, dims.contact_bodies, t, 1.0);
    push_linear(&mut out, "aux.ref_pos", d, 3 * dims.pos_bodies, t, 1.0);
    push_linear(&mut out, "aux.robot_pos", d, 3 * dims.pos_bodies, t, 1.0);
    push_linear(&mut out, "critic.l1", dims.critic_dim, cfg.critic_hidden, t, 1.0);
    push_linear(&mut out, "critic.l2", cfg.critic_hidden, cfg.critic_hidden, t, 1.0);
    push_linear(&mut out, "critic.l3", cfg.critic_hidden, 1, t, 1.0);
    out
}

/// Parameter totals of the deployed actor (auxiliary heads and critic are
/// counted separately).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub activated: usize,
    pub training_only: usize,
}

impl ParamCount {
    pub fn activated_fraction(&self) -> f64 {
        self.activated as f64 / self.total as f64
    }
}

/// Counts from the configuration alone, without allocating the model.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let specs = param_specs(cfg);
    let mut per_expert = vec![vec![0usize; cfg.experts]; cfg.blocks];
    let (mut dense, mut training) = (0, 0);
    for s in &specs {
        match s.role {
            Role::Dense => dense += s.len(),
            Role::Training => training += s.len(),
            Role::Expert { block, expert } => per_expert[block][expert] += s.len(),
        }
    }
    let routed: usize = per_expert.iter().flatten().sum();
    let active: usize = per_expert
        .iter()
        .map(|layer| {
            let mut sizes = layer.clone();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            sizes.iter().take(cfg.top_k).sum::<usize>()
        })
        .sum();
    ParamCount {
        total: dense + routed,
        activated: dense + active,
        training_only: training,
    }
}
