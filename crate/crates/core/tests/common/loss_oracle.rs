//! Scalar-loop versions of the auxiliary and dead-expert objectives.

pub type Mat = Vec<Vec<f64>>;

fn count(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64
}

pub fn velocity_nll(mu: &Mat, log_std: &Mat, target: &Mat, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for t in 0..mu.len() {
        if !mask[t] {
            continue;
        }
        for j in 0..mu[t].len() {
            let sigma = log_std[t][j].exp();
            let z = (target[t][j] - mu[t][j]) / sigma;
            s += 0.5 * (z * z + 2.0 * sigma.ln());
        }
    }
    s / count(mask)
}

pub fn contact_bce(logits: &Mat, labels: &Mat, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    let k = logits[0].len() as f64;
    for t in 0..logits.len() {
        if !mask[t] {
            continue;
        }
        for j in 0..logits[t].len() {
            let p = 1.0 / (1.0 + (-logits[t][j]).exp());
            let c = labels[t][j];
            s -= c * p.ln() + (1.0 - c) * (1.0 - p).ln();
        }
    }
    s / (count(mask) * k)
}

pub fn position_mse(pred: &Mat, target: &Mat, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    let w = pred[0].len() as f64;
    for t in 0..pred.len() {
        if !mask[t] {
            continue;
        }
        for j in 0..pred[t].len() {
            s += (pred[t][j] - target[t][j]).powi(2);
        }
    }
    s / (count(mask) * w)
}

/// `scores[layer][token][expert]`; the k-th largest score of each token is
/// its threshold.
pub fn dead_expert(scores: &[Mat], mask: &[bool], k: usize) -> f64 {
    let mut total = 0.0;
    let layers = scores.len() as f64;
    let n = count(mask);
    for layer in scores {
        let experts = layer[0].len();
        let top = |row: &[f64]| {
            let mut idx: Vec<usize> = (0..experts).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(k);
            idx
        };
        let mut used = vec![false; experts];
        for (t, row) in layer.iter().enumerate() {
            if mask[t] {
                for e in top(row) {
                    used[e] = true;
                }
            }
        }
        let dead: Vec<usize> = (0..experts).filter(|&e| !used[e]).collect();
        if dead.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for (t, row) in layer.iter().enumerate() {
            if !mask[t] {
                continue;
            }
            let tau = top(row).iter().map(|&e| row[e]).fold(f64::INFINITY, f64::min);
            for &e in &dead {
                s += (tau - row[e]).max(0.0);
            }
        }
        total += s / (n * dead.len() as f64);
    }
    total / layers
}
