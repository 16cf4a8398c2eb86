//! Masked loss terms on the tape. `mask` is an `[N×1]` column of 0/1 and
//! `n` the number of valid rows.

use diffmath::{Graph, Real, Result, Tensor, Var};

use crate::policy::LayerRoute;

fn masked_sum<T: Real>(g: &mut Graph<T>, per_row: Var, mask: Var) -> Result<Var> {
    let m = g.mul_col(per_row, mask)?;
    g.sum(m)
}

/// Gaussian negative log-likelihood of the base velocity,
/// `1/N Σ m · ½ Σ_j [((v − μ)/σ)² + 2 log σ]`.
pub fn velocity_nll<T: Real>(g: &mut Graph<T>, mu: Var, log_std: Var, target: Var, mask: Var, n: f64) -> Result<Var> {
    let diff = g.sub(target, mu)?;
    let neg = g.neg(log_std)?;
    let inv = g.exp(neg)?;
    let z = g.mul(diff, inv)?;
    let sq = g.square(z)?;
    let two = g.scale(log_std, 2.0)?;
    let per = g.add(sq, two)?;
    let per = g.sum_rows(per)?;
    let s = masked_sum(g, per, mask)?;
    g.scale(s, 0.5 / n)
}

/// Binary cross-entropy with logits, `softplus(ℓ) − ℓ·c`, averaged over
/// valid rows and `K_c` bodies.
pub fn contact_bce<T: Real>(g: &mut Graph<T>, logits: Var, labels: Var, mask: Var, n: f64) -> Result<Var> {
    let k = g.dims(logits).1 as f64;
    let sp = g.softplus(logits)?;
    let lc = g.mul(logits, labels)?;
    let per = g.sub(sp, lc)?;
    let per = g.sum_rows(per)?;
    let s = masked_sum(g, per, mask)?;
    g.scale(s, 1.0 / (n * k))
}

/// Squared position error over `3·K_p` coordinates per row.
pub fn position_mse<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mask: Var, n: f64) -> Result<Var> {
    let width = g.dims(pred).1 as f64;
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let per = g.sum_rows(sq)?;
    let s = masked_sum(g, per, mask)?;
    g.scale(s, 1.0 / (n * width))
}

/// Experts of one layer that no valid token selected.
pub fn dead_experts(route: &LayerRoute, valid: &[bool], experts: usize) -> Vec<usize> {
    let mut used = vec![false; experts];
    for (d, _) in route.decisions.iter().zip(valid).filter(|(_, &v)| v) {
        for &e in &d.experts {
            used[e] = true;
        }
    }
    (0..experts).filter(|&e| !used[e]).collect()
}

/// Hinge `[τ − s]₊` over valid tokens and dead experts, thresholds
/// detached, normalized by `N · max(1, |D|)` per layer and averaged over
/// layers. `None` when no layer has a dead expert.
pub fn dead_expert_margin<T: Real>(
    g: &mut Graph<T>,
    routes: &[LayerRoute],
    valid: &[bool],
    experts: usize,
) -> Result<Option<Var>> {
    let n = valid.iter().filter(|&&v| v).count() as f64;
    let layers = routes.len() as f64;
    let mut total: Option<Var> = None;
    for route in routes {
        let dead = dead_experts(route, valid, experts);
        if dead.is_empty() || n == 0.0 {
            continue;
        }
        let mut pairs = Vec::new();
        let mut taus = Vec::new();
        for (t, d) in route.decisions.iter().enumerate() {
            if !valid[t] {
                continue;
            }
            for &e in &dead {
                pairs.push((t, e));
                taus.push(T::of(d.tau));
            }
        }
        let s = g.gather_elems(route.scores, &pairs)?;
        let tau = g.constant(Tensor::column(taus))?;
        let gap = g.sub(tau, s)?;
        let hinge = g.relu(gap)?;
        let sum = g.sum(hinge)?;
        let layer = g.scale(sum, 1.0 / (n * dead.len() as f64 * layers))?;
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    Ok(total)
}

/// Clipped surrogate `1/N Σ m · min(r Â, clip(r, 1−ε, 1+ε) Â)` with
/// `r = exp(log π − log π_old)`. Returns the objective and the ratios.
pub fn clipped_surrogate<T: Real>(
    g: &mut Graph<T>,
    logp: Var,
    old_logp: Var,
    adv: Var,
    mask: Var,
    n: f64,
    eps: f64,
) -> Result<(Var, Var)> {
    let d = g.sub(logp, old_logp)?;
    let r = g.exp(d)?;
    let s1 = g.mul(r, adv)?;
    let rc = g.clamp(r, 1.0 - eps, 1.0 + eps)?;
    let s2 = g.mul(rc, adv)?;
    let m = g.minimum(s1, s2)?;
    let s = masked_sum(g, m, mask)?;
    Ok((g.scale(s, 1.0 / n)?, r))
}

/// `1/N Σ m (V − R)²`.
pub fn value_mse<T: Real>(g: &mut Graph<T>, v: Var, returns: Var, mask: Var, n: f64) -> Result<Var> {
    let d = g.sub(v, returns)?;
    let sq = g.square(d)?;
    let s = masked_sum(g, sq, mask)?;
    g.scale(s, 1.0 / n)
}
