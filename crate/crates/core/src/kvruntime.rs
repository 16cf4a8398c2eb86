//! Ring-buffer key/value cache for one-token-per-step inference.
//!
//! Keys are stored after QK-normalization and rotary embedding at the
//! episode-local position, so a wrapped ring attends exactly as a linear
//! buffer holding the same entries. Attention gathers entries oldest first.

use diffmath::{Binder, Graph, Real, Tensor};

use crate::policy::{ModelConfig, PolicyModel, RouterDecision};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    capacity: usize,
    kv_dim: usize,
    head_dim: usize,
    /// Per layer: keys and values, each `capacity × kv_dim`.
    layers: Vec<(Vec<T>, Vec<T>)>,
    cursor: usize,
    valid: usize,
    position: usize,
}

/// Outputs of one cached step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
    /// One decision per MoE layer.
    pub decisions: Vec<RouterDecision>,
    /// Cached entries each query attended to, including itself.
    pub attended: usize,
    pub flops: u64,
}

impl<T: Real> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.context;
        let kv = cfg.kv_dim();
        Self {
            capacity: c,
            kv_dim: kv,
            head_dim: cfg.head_dim(),
            layers: (0..cfg.blocks).map(|_| (vec![T::zero(); c * kv], vec![T::zero(); c * kv])).collect(),
            cursor: 0,
            valid: 0,
            position: 0,
        }
    }

    pub fn clear(&mut self) {
        self.cursor = 0;
        self.valid = 0;
        self.position = 0;
        for (k, v) in &mut self.layers {
            k.iter_mut().for_each(|x| *x = T::zero());
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.valid
    }

    pub fn is_empty(&self) -> bool {
        self.valid == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Position the next token will take.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Same entries laid out from slot 0, oldest first.
    pub fn linearized(&self) -> Self {
        let mut out = self.clone();
        let order = self.order(self.valid);
        let kv = self.kv_dim;
        for (dst, src) in out.layers.iter_mut().zip(&self.layers) {
            for (slot, &i) in order.iter().enumerate() {
                dst.0[slot * kv..(slot + 1) * kv].copy_from_slice(&src.0[i * kv..(i + 1) * kv]);
                dst.1[slot * kv..(slot + 1) * kv].copy_from_slice(&src.1[i * kv..(i + 1) * kv]);
            }
        }
        out.cursor = self.valid % self.capacity;
        out
    }

    /// Slots of the newest `n` entries, oldest first, where the newest was
    /// written just before `cursor`.
    fn order(&self, n: usize) -> Vec<usize> {
        let c = self.capacity;
        (0..n).map(|i| (self.cursor + c - n + i) % c).collect()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.capacity != cfg.context || self.kv_dim != cfg.kv_dim() || self.layers.len() != cfg.blocks {
            return Err(Error::Config("KV cache was built for another model configuration".into()));
        }
        Ok(())
    }

    fn head_context(&self, layer: usize, head: usize, n: usize, keys: bool) -> Tensor<T> {
        let hd = self.head_dim;
        let buf = if keys { &self.layers[layer].0 } else { &self.layers[layer].1 };
        let mut data = Vec::with_capacity(n * hd);
        for i in self.order(n) {
            let base = i * self.kv_dim + head * hd;
            data.extend_from_slice(&buf[base..base + hd]);
        }
        Tensor::matrix(n, hd, data).expect("context shape")
    }
}

/// Processes one new normalized observation, attending to at most `C`
/// entries including itself.
pub fn step<T: Real>(model: &PolicyModel<T>, cache: &mut KvCache<T>, obs: &[T]) -> Result<StepOutput> {
    let cfg = model.config();
    cache.check(cfg)?;
    if obs.len() != cfg.dims.obs_dim {
        return Err(Error::Config(format!("observation width {}, model expects {}", obs.len(), cfg.dims.obs_dim)));
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let x = g.constant(Tensor::row(obs.to_vec()))?;
    let refs = model.ref_slice(&mut g, x)?;
    let mut h = model.embed(&mut g, &mut b, x)?;
    let pos = [cache.position];
    let slot = cache.cursor;
    let n = (cache.valid + 1).min(cache.capacity);
    let kv = cache.kv_dim;
    let hd = cache.head_dim;
    let group = cfg.heads / cfg.kv_heads;
    cache.cursor = (slot + 1) % cache.capacity;
    let mut decisions = Vec::with_capacity(cfg.blocks);
    for layer in 0..cfg.blocks {
        let (xn, qs, ks, vs) = model.qkv(&mut g, &mut b, layer, h, &pos)?;
        {
            let (kb, vb) = &mut cache.layers[layer];
            for (j, (&k, &v)) in ks.iter().zip(&vs).enumerate() {
                let at = slot * kv + j * hd;
                kb[at..at + hd].copy_from_slice(g.value(k).data());
                vb[at..at + hd].copy_from_slice(g.value(v).data());
            }
        }
        let mut ctx = Vec::with_capacity(cfg.kv_heads);
        for j in 0..cfg.kv_heads {
            let k = g.constant(cache.head_context(layer, j, n, true))?;
            let v = g.constant(cache.head_context(layer, j, n, false))?;
            ctx.push((k, v));
        }
        let heads = qs
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let (k, v) = ctx[i / group];
                model.attend(&mut g, q, k, v, None)
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = g.concat_cols(&heads)?;
        h = model.attn_out(&mut g, &mut b, layer, h, xn, heads)?;
        let (h2, mut route, _) = model.moe(&mut g, &mut b, layer, h, refs)?;
        h = h2;
        decisions.push(route.decisions.remove(0));
    }
    let (mu, log_std) = model.action_head(&mut g, &mut b, h)?;
    cache.valid = n;
    cache.position += 1;
    Ok(StepOutput {
        mu: g.value(mu).to_f64_vec(),
        log_std: g.value(log_std).to_f64_vec(),
        decisions,
        attended: n,
        flops: g.flops(),
    })
}

/// Steps many independent caches, split across `workers` threads.
pub fn step_batch<T: Real>(
    model: &PolicyModel<T>,
    caches: &mut [KvCache<T>],
    obs: &[Vec<T>],
    workers: usize,
) -> Vec<Result<StepOutput>> {
    assert_eq!(caches.len(), obs.len(), "one observation per cache");
    if workers <= 1 || caches.len() <= 1 {
        return caches.iter_mut().zip(obs).map(|(c, o)| step(model, c, o)).collect();
    }
    let chunk = caches.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = caches
            .chunks_mut(chunk)
            .zip(obs.chunks(chunk))
            .map(|(cs, os)| s.spawn(move || cs.iter_mut().zip(os).map(|(c, o)| step(model, c, o)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("inference worker panicked"))
            .collect()
    })
}

/// Uncached reference: one causal pass over `obs`, returning the action
/// mean of the last token and the work done.
pub fn window_forward<T: Real>(model: &PolicyModel<T>, obs: &Tensor<T>, positions: &[usize]) -> Result<(Vec<f64>, u64)> {
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let out = model.forward(&mut g, &mut b, &crate::policy::SeqInput::single(obs.clone(), positions.to_vec()))?;
    let mu = g.value(out.mu);
    Ok((mu.row_slice(mu.rows() - 1).iter().map(|x| x.f64()).collect(), g.flops()))
}
