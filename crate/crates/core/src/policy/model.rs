use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffmath::{Binder, Graph, ParamId, ParamStore, Real, Tensor, Var};

use super::config::{param_specs, Init, ModelConfig, ACTION_LOG_STD, VEL_STD};
use super::normalizer::{EmaNormalizer, VAR_FLOOR};
use super::router::{select_top_k, RouterDecision};
use crate::{Error, Result};

/// Additive attention bias for disallowed key positions.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    q_norm: ParamId,
    k_norm: ParamId,
    gate: Linear,
    wo: ParamId,
    moe_norm: ParamId,
    router: Linear,
    shared: Option<Mlp>,
    experts: Vec<Mlp>,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    tok: Mlp,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    head: Mlp,
    log_std: ParamId,
    aux_norm: ParamId,
    vel_mu: Linear,
    vel_log_std: Linear,
    contact: Linear,
    ref_pos: Linear,
    robot_pos: Linear,
    critic: [Linear; 3],
}

/// Normalized observations for `B` contiguous segments of equal length.
///
/// Token `i` attends to token `j` when both lie in the same segment,
/// `j ≤ i`, `i - j < C`, and positions advance by one between them (a
/// position reset marks a new episode).
#[derive(Clone, Debug)]
pub struct SeqInput<T> {
    pub obs: Tensor<T>,
    pub positions: Vec<usize>,
    pub seg_len: usize,
}

impl<T: Real> SeqInput<T> {
    pub fn single(obs: Tensor<T>, positions: Vec<usize>) -> Self {
        let seg_len = obs.rows();
        Self {
            obs,
            positions,
            seg_len,
        }
    }

    pub fn segments(&self) -> usize {
        self.obs.rows() / self.seg_len.max(1)
    }
}

/// Tape nodes for the router of one MoE layer.
#[derive(Clone, Debug)]
pub struct LayerRoute {
    /// Router scores `[N×E]`.
    pub scores: Var,
    pub decisions: Vec<RouterDecision>,
}

#[derive(Clone, Copy, Debug)]
pub struct AuxOutputs {
    pub vel_mu: Var,
    /// Clamped log standard deviation of the velocity estimate.
    pub vel_log_std: Var,
    pub contact_logits: Var,
    pub ref_pos: Var,
    pub robot_pos: Var,
}

/// Work done by one forward call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Causal passes, one per segment.
    pub passes: usize,
    pub tokens: usize,
    /// Routed-expert evaluations, one per (token, selected expert).
    pub expert_evals: usize,
}

impl std::ops::AddAssign for ForwardStats {
    fn add_assign(&mut self, o: Self) {
        self.passes += o.passes;
        self.tokens += o.tokens;
        self.expert_evals += o.expert_evals;
    }
}

#[derive(Clone, Debug)]
pub struct ActorOutputs {
    pub mu: Var,
    /// Clamped `[1×J]` log standard deviation.
    pub log_std: Var,
    /// Residual stream entering the first MoE sublayer.
    pub pre_moe: Var,
    pub aux: AuxOutputs,
    pub routes: Vec<LayerRoute>,
    pub stats: ForwardStats,
}

pub struct PolicyModel<T: Real> {
    cfg: ModelConfig,
    pub params: ParamStore<T>,
    ids: Ids,
    /// Statistics for the actor observation.
    pub obs_norm: EmaNormalizer,
    /// Statistics for the critic input.
    pub critic_norm: EmaNormalizer,
    /// Statistics of value targets; the critic predicts standardized values.
    pub value_norm: EmaNormalizer,
}

impl<T: Real> Clone for PolicyModel<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            obs_norm: self.obs_norm.clone(),
            critic_norm: self.critic_norm.clone(),
            value_norm: self.value_norm.clone(),
        }
    }
}

fn init_values(init: Init, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows * cols;
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Constant(c) => vec![c; n],
        Init::Uniform(gain) => {
            let a = gain / (rows as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        }
    }
}

impl<T: Real> PolicyModel<T> {
    /// Fresh parameters drawn from `cfg.seed`; identical across dtypes up
    /// to rounding.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        for s in param_specs(&cfg) {
            let data = init_values(s.init, s.rows, s.cols, &mut rng);
            let t = Tensor::<f64>::matrix(s.rows, s.cols, data)?.cast::<T>();
            params.add(s.name, t)?;
        }
        Self::from_params(cfg, params)
    }

    /// Wraps an existing store whose names and shapes must follow the
    /// configuration.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let id = params
                .find(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", s.name)))?;
            if params.get(id).dims() != (s.rows, s.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    params.get(id).dims(),
                    (s.rows, s.cols)
                )));
            }
        }
        let ids = resolve(&cfg, &params);
        let obs_norm = EmaNormalizer::new(cfg.dims.obs_dim, cfg.ema_decay);
        let critic_norm = EmaNormalizer::new(cfg.dims.critic_dim, cfg.ema_decay);
        let value_norm = EmaNormalizer::new(1, cfg.ema_decay);
        Ok(Self {
            cfg,
            params,
            ids,
            obs_norm,
            critic_norm,
            value_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn cast<U: Real>(&self) -> PolicyModel<U> {
        PolicyModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            obs_norm: self.obs_norm.clone(),
            critic_norm: self.critic_norm.clone(),
            value_norm: self.value_norm.clone(),
        }
    }

    fn p(&self, g: &mut Graph<T>, b: &mut Binder, id: ParamId) -> Result<Var> {
        Ok(b.var(g, &self.params, id)?)
    }

    fn linear(&self, g: &mut Graph<T>, b: &mut Binder, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(g, b, l.w)?;
        let bias = self.p(g, b, l.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, bias)?)
    }

    fn mlp(&self, g: &mut Graph<T>, b: &mut Binder, x: Var, m: Mlp) -> Result<Var> {
        let h = self.linear(g, b, x, m.l1)?;
        let h = g.silu(h)?;
        self.linear(g, b, h, m.l2)
    }

    fn norm(&self, g: &mut Graph<T>, b: &mut Binder, x: Var, gain: ParamId) -> Result<Var> {
        let gv = self.p(g, b, gain)?;
        Ok(g.rmsnorm_rows(x, gv, self.cfg.norm_eps)?)
    }

    /// Token embedding of normalized observations `[N×obs] → [N×d]`.
    pub(crate) fn embed(&self, g: &mut Graph<T>, b: &mut Binder, obs: Var) -> Result<Var> {
        self.mlp(g, b, obs, self.ids.tok)
    }

    /// Pre-norm input, per-head queries and per-KV-head keys and values
    /// after QK-normalization and rotary embedding.
    #[allow(clippy::type_complexity)]
    pub(crate) fn qkv(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        layer: usize,
        h: Var,
        positions: &[usize],
    ) -> Result<(Var, Vec<Var>, Vec<Var>, Vec<Var>)> {
        let blk = &self.ids.blocks[layer];
        let hd = self.cfg.head_dim();
        let xn = self.norm(g, b, h, blk.attn_norm)?;
        let wq = self.p(g, b, blk.wq)?;
        let wk = self.p(g, b, blk.wk)?;
        let wv = self.p(g, b, blk.wv)?;
        let q = g.matmul(xn, wq)?;
        let k = g.matmul(xn, wk)?;
        let v = g.matmul(xn, wv)?;
        let qn = self.p(g, b, blk.q_norm)?;
        let kn = self.p(g, b, blk.k_norm)?;
        let eps = self.cfg.norm_eps;
        let mut qs = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let s = g.slice_cols(q, i * hd, hd)?;
            let s = g.rmsnorm_rows(s, qn, eps)?;
            qs.push(g.rope(s, positions, hd)?);
        }
        let (mut ks, mut vs) = (Vec::new(), Vec::new());
        for j in 0..self.cfg.kv_heads {
            let s = g.slice_cols(k, j * hd, hd)?;
            let s = g.rmsnorm_rows(s, kn, eps)?;
            ks.push(g.rope(s, positions, hd)?);
            vs.push(g.slice_cols(v, j * hd, hd)?);
        }
        Ok((xn, qs, ks, vs))
    }

    /// Scaled dot-product attention of `q[n×hd]` over `k, v[m×hd]` with an
    /// additive bias `[n×m]`.
    pub(crate) fn attend(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (self.cfg.head_dim() as f64).sqrt())?;
        let s = match bias {
            Some(m) => g.add(s, m)?,
            None => s,
        };
        let p = g.softmax_rows(s)?;
        Ok(g.matmul(p, v)?)
    }

    /// Gate, output projection and residual add for concatenated heads.
    pub(crate) fn attn_out(&self, g: &mut Graph<T>, b: &mut Binder, layer: usize, h: Var, xn: Var, heads: Var) -> Result<Var> {
        let blk = &self.ids.blocks[layer];
        let gate = self.linear(g, b, xn, blk.gate)?;
        let gate = g.sigmoid(gate)?;
        let o = g.mul(heads, gate)?;
        let wo = self.p(g, b, blk.wo)?;
        let o = g.matmul(o, wo)?;
        Ok(g.add(h, o)?)
    }

    /// MoE sublayer with residual add. `refs` holds the normalized
    /// reference features of each token.
    pub(crate) fn moe(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        layer: usize,
        h: Var,
        refs: Var,
    ) -> Result<(Var, LayerRoute, usize)> {
        let blk = &self.ids.blocks[layer];
        let k = self.cfg.top_k;
        let n = g.dims(h).0;
        let u = self.norm(g, b, h, blk.moe_norm)?;
        let scores = self.linear(g, b, refs, blk.router)?;
        let sv = g.value(scores);
        let decisions = (0..n)
            .map(|t| {
                let row: Vec<f64> = sv.row_slice(t).iter().map(|x| x.f64()).collect();
                select_top_k(&row, k)
            })
            .collect::<Result<Vec<_>>>()?;
        let cols = (0..k)
            .map(|j| {
                let idx: Vec<(usize, usize)> = decisions.iter().enumerate().map(|(t, d)| (t, d.experts[j])).collect();
                g.gather_elems(scores, &idx)
            })
            .collect::<diffmath::Result<Vec<_>>>()?;
        let sel = g.concat_cols(&cols)?;
        let alpha = g.softmax_rows(sel)?;

        let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.cfg.experts];
        for (t, d) in decisions.iter().enumerate() {
            for (j, &e) in d.experts.iter().enumerate() {
                slots[e].push((t, j));
            }
        }
        let mut parts = Vec::new();
        let mut rows = Vec::with_capacity(n * k);
        let mut evals = 0;
        for (e, slot) in slots.iter().enumerate() {
            if slot.is_empty() {
                continue;
            }
            let idx: Vec<usize> = slot.iter().map(|&(t, _)| t).collect();
            let ue = g.gather_rows(u, &idx)?;
            let fe = self.mlp(g, b, ue, blk.experts[e])?;
            let ae = g.gather_elems(alpha, slot)?;
            parts.push(g.mul_col(fe, ae)?);
            rows.extend_from_slice(&idx);
            evals += idx.len();
        }
        let routed = g.concat_rows(&parts)?;
        let mut out = g.scatter_add_rows(routed, &rows, n)?;
        if let Some(sh) = blk.shared {
            let s = self.mlp(g, b, u, sh)?;
            out = g.add(out, s)?;
        }
        let h = g.add(h, out)?;
        Ok((h, LayerRoute { scores, decisions }, evals))
    }

    pub(crate) fn aux(&self, g: &mut Graph<T>, b: &mut Binder, pre_moe: Var) -> Result<AuxOutputs> {
        let ids = &self.ids;
        let x = self.norm(g, b, pre_moe, ids.aux_norm)?;
        let vel_mu = self.linear(g, b, x, ids.vel_mu)?;
        let ls = self.linear(g, b, x, ids.vel_log_std)?;
        let vel_log_std = g.clamp(ls, VEL_STD.0.ln(), VEL_STD.1.ln())?;
        Ok(AuxOutputs {
            vel_mu,
            vel_log_std,
            contact_logits: self.linear(g, b, x, ids.contact)?,
            ref_pos: self.linear(g, b, x, ids.ref_pos)?,
            robot_pos: self.linear(g, b, x, ids.robot_pos)?,
        })
    }

    /// Action mean `[N×J]` and clamped log-std `[1×J]` from the final residual stream.
    pub(crate) fn action_head(&self, g: &mut Graph<T>, b: &mut Binder, h: Var) -> Result<(Var, Var)> {
        let x = self.norm(g, b, h, self.ids.final_norm)?;
        let mu = self.mlp(g, b, x, self.ids.head)?;
        let ls = self.p(g, b, self.ids.log_std)?;
        let ls = g.clamp(ls, ACTION_LOG_STD.0, ACTION_LOG_STD.1)?;
        Ok((mu, ls))
    }

    pub(crate) fn ref_slice(&self, g: &mut Graph<T>, obs: Var) -> Result<Var> {
        let d = &self.cfg.dims;
        Ok(g.slice_cols(obs, d.ref_offset, d.ref_len)?)
    }

    /// One causal pass per segment over all tokens of `input`.
    pub fn forward(&self, g: &mut Graph<T>, b: &mut Binder, input: &SeqInput<T>) -> Result<ActorOutputs> {
        let (n, w) = input.obs.dims();
        if w != self.cfg.dims.obs_dim {
            return Err(Error::Config(format!("observation width {w}, model expects {}", self.cfg.dims.obs_dim)));
        }
        let t = input.seg_len;
        if t == 0 || n % t != 0 || input.positions.len() != n {
            return Err(Error::Config(format!("{n} tokens do not form segments of length {t}")));
        }
        let segs = n / t;
        let obs = g.constant(input.obs.clone())?;
        let refs = self.ref_slice(g, obs)?;
        let masks = (0..segs)
            .map(|s| g.constant(self.causal_bias(&input.positions[s * t..(s + 1) * t])))
            .collect::<diffmath::Result<Vec<_>>>()?;
        let mut h = self.embed(g, b, obs)?;
        let mut pre_moe = None;
        let mut routes = Vec::new();
        let mut evals = 0;
        let group = self.cfg.heads / self.cfg.kv_heads;
        for layer in 0..self.cfg.blocks {
            let (xn, qs, ks, vs) = self.qkv(g, b, layer, h, &input.positions)?;
            let mut seg_out = Vec::with_capacity(segs);
            for (s, &mask) in masks.iter().enumerate() {
                let kv: Vec<(Var, Var)> = ks
                    .iter()
                    .zip(&vs)
                    .map(|(&k, &v)| Ok((g.slice_rows(k, s * t, t)?, g.slice_rows(v, s * t, t)?)))
                    .collect::<diffmath::Result<_>>()?;
                let mut heads = Vec::with_capacity(qs.len());
                for (i, &q) in qs.iter().enumerate() {
                    let qs_ = g.slice_rows(q, s * t, t)?;
                    let (k, v) = kv[i / group];
                    heads.push(self.attend(g, qs_, k, v, Some(mask))?);
                }
                seg_out.push(g.concat_cols(&heads)?);
            }
            let heads = g.concat_rows(&seg_out)?;
            h = self.attn_out(g, b, layer, h, xn, heads)?;
            if pre_moe.is_none() {
                pre_moe = Some(h);
            }
            let (h2, route, ev) = self.moe(g, b, layer, h, refs)?;
            h = h2;
            routes.push(route);
            evals += ev;
        }
        let pre_moe = pre_moe.expect("at least one block");
        let aux = self.aux(g, b, pre_moe)?;
        let (mu, log_std) = self.action_head(g, b, h)?;
        Ok(ActorOutputs {
            mu,
            log_std,
            pre_moe,
            aux,
            routes,
            stats: ForwardStats {
                passes: segs,
                tokens: n,
                expert_evals: evals,
            },
        })
    }

    /// Attention bias of one segment.
    pub fn causal_bias(&self, positions: &[usize]) -> Tensor<T> {
        let t = positions.len();
        let c = self.cfg.context;
        let mut m = Tensor::filled(t, t, T::of(MASKED));
        for i in 0..t {
            for j in 0..=i {
                if i - j < c && positions[i] + j == positions[j] + i {
                    m.data_mut()[i * t + j] = T::zero();
                }
            }
        }
        m
    }

    /// Value estimates `[N×1]` from normalized critic inputs.
    pub fn critic(&self, g: &mut Graph<T>, b: &mut Binder, x: Var) -> Result<Var> {
        let [l1, l2, l3] = self.ids.critic;
        let h = self.linear(g, b, x, l1)?;
        let h = g.silu(h)?;
        let h = self.linear(g, b, h, l2)?;
        let h = g.silu(h)?;
        self.linear(g, b, h, l3)
    }

    /// Value estimates in return units for rows of normalized critic input.
    pub fn values(&self, critic_obs: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let x = g.constant(critic_obs.clone())?;
        let v = self.critic(&mut g, &mut b, x)?;
        let (m, s) = self.value_scale();
        Ok(g.value(v).data().iter().map(|v| v.f64() * s + m).collect())
    }

    /// Mean and standard deviation mapping critic outputs to returns.
    pub fn value_scale(&self) -> (f64, f64) {
        (self.value_norm.mean[0], self.value_norm.var[0].max(VAR_FLOOR).sqrt())
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<T> {
        self.obs_norm.normalize(obs).into_iter().map(T::of).collect()
    }

    pub fn normalize_critic(&self, obs: &[f64]) -> Vec<T> {
        self.critic_norm.normalize(obs).into_iter().map(T::of).collect()
    }

    /// Router decisions per layer for normalized observations, without
    /// running the backbone.
    pub fn route(&self, obs: &Tensor<T>) -> Result<Vec<Vec<RouterDecision>>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let x = g.constant(obs.clone())?;
        let refs = self.ref_slice(&mut g, x)?;
        (0..self.cfg.blocks)
            .map(|l| {
                let s = self.linear(&mut g, &mut b, refs, self.ids.blocks[l].router)?;
                let sv = g.value(s);
                (0..sv.rows())
                    .map(|t| select_top_k(&sv.row_slice(t).iter().map(|x| x.f64()).collect::<Vec<_>>(), self.cfg.top_k))
                    .collect()
            })
            .collect()
    }

    /// Names of the parameters of routed expert `e` in layer `l`.
    pub fn expert_param_ids(&self, l: usize, e: usize) -> [ParamId; 4] {
        let m = self.ids.blocks[l].experts[e];
        [m.l1.w, m.l1.b, m.l2.w, m.l2.b]
    }
}

fn resolve<T: Real>(cfg: &ModelConfig, p: &ParamStore<T>) -> Ids {
    let id = |n: String| p.find(&n).expect("parameter validated");
    let lin = |n: &str| Linear {
        w: id(format!("{n}.w")),
        b: id(format!("{n}.b")),
    };
    let mlp = |n: &str| Mlp {
        l1: lin(&format!("{n}.l1")),
        l2: lin(&format!("{n}.l2")),
    };
    let blocks = (0..cfg.blocks)
        .map(|l| {
            let pfx = format!("block{l}");
            BlockIds {
                attn_norm: id(format!("{pfx}.attn_norm")),
                wq: id(format!("{pfx}.wq")),
                wk: id(format!("{pfx}.wk")),
                wv: id(format!("{pfx}.wv")),
                q_norm: id(format!("{pfx}.q_norm")),
                k_norm: id(format!("{pfx}.k_norm")),
                gate: lin(&format!("{pfx}.gate")),
                wo: id(format!("{pfx}.wo")),
                moe_norm: id(format!("{pfx}.moe_norm")),
                router: lin(&format!("{pfx}.router")),
                shared: cfg.shared_expert.then(|| mlp(&format!("{pfx}.shared"))),
                experts: (0..cfg.experts).map(|e| mlp(&format!("{pfx}.expert{e}"))).collect(),
            }
        })
        .collect();
    Ids {
        tok: mlp("tok"),
        blocks,
        final_norm: id("final_norm".into()),
        head: mlp("head"),
        log_std: id("log_std".into()),
        aux_norm: id("aux.norm".into()),
        vel_mu: lin("aux.vel_mu"),
        vel_log_std: lin("aux.vel_log_std"),
        contact: lin("aux.contact"),
        ref_pos: lin("aux.ref_pos"),
        robot_pos: lin("aux.robot_pos"),
        critic: [lin("critic.l1"), lin("critic.l2"), lin("critic.l3")],
    }
}
