use serde::Serialize;

use crate::{Error, Result};

/// Top-k routing outcome for one token.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouterDecision {
    /// Selected experts, highest score first.
    pub experts: Vec<usize>,
    /// Mixture weights, softmax over the selected scores.
    pub alpha: Vec<f64>,
    pub scores: Vec<f64>,
    /// Score of the k-th selected expert.
    pub tau: f64,
}

/// Picks the `k` highest scores; equal scores prefer the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<RouterDecision> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("top-{k} over {} experts", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    let top = scores[order[0]];
    let w: Vec<f64> = order.iter().map(|&e| (scores[e] - top).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(RouterDecision {
        tau: scores[order[k - 1]],
        alpha: w.iter().map(|x| x / z).collect(),
        experts: order,
        scores: scores.to_vec(),
    })
}

/// Routed-token counts per expert.
pub fn utilization(decisions: &[&RouterDecision], experts: usize) -> Vec<usize> {
    let mut counts = vec![0; experts];
    for d in decisions {
        for &e in &d.experts {
            counts[e] += 1;
        }
    }
    counts
}
