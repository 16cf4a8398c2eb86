use rand::Rng;
use rand_distr::StandardNormal;

use diffmath::{Graph, Real, Result, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density.
pub fn log_prob(action: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mu)
        .zip(log_std)
        .map(|((a, m), s)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - 0.5 * LN_2PI
        })
        .sum()
}

pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 * (LN_2PI + 1.0)).sum()
}

pub fn sample(mu: &[f64], log_std: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(log_std)
        .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Row-wise log-density `[n×1]` of `actions[n×J]` under `mu[n×J]` and a
/// shared `log_std[1×J]`.
pub fn log_prob_rows<T: Real>(g: &mut Graph<T>, mu: Var, log_std: Var, actions: Var) -> Result<Var> {
    let j = g.dims(mu).1;
    let diff = g.sub(actions, mu)?;
    let neg = g.neg(log_std)?;
    let inv = g.exp(neg)?;
    let z = g.mul_row(diff, inv)?;
    let sq = g.square(z)?;
    let quad = g.sum_rows(sq)?;
    let quad = g.scale(quad, -0.5)?;
    let norm = g.sum(log_std)?;
    let norm = g.offset(norm, 0.5 * LN_2PI * j as f64)?;
    let norm = g.neg(norm)?;
    g.add_row(quad, norm)
}

/// Entropy of the shared diagonal Gaussian, `[1×1]`.
pub fn entropy_graph<T: Real>(g: &mut Graph<T>, log_std: Var) -> Result<Var> {
    let j = g.dims(log_std).1;
    let s = g.sum(log_std)?;
    g.offset(s, 0.5 * (LN_2PI + 1.0) * j as f64)
}
