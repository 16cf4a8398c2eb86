//! Plain nested-vector forward pass of the actor, written against the
//! parameter names only.

use diffmath::ROPE_BASE;
use holomotion::policy::{PolicyModel, ACTION_LOG_STD, VEL_STD};

pub type Mat = Vec<Vec<f64>>;

pub struct Reference {
    pub pre_moe: Mat,
    pub mu: Mat,
    pub log_std: Vec<f64>,
    pub vel_mu: Mat,
    pub vel_log_std: Mat,
    pub contact: Mat,
    pub ref_pos: Mat,
    pub robot_pos: Mat,
    /// Selected experts per layer and token.
    pub selected: Vec<Vec<Vec<usize>>>,
}

fn param(m: &PolicyModel<f64>, name: &str) -> Mat {
    let t = m.params.get(m.params.find(name).unwrap_or_else(|| panic!("no {name}")));
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn linear(m: &PolicyModel<f64>, x: &Mat, name: &str) -> Mat {
    let w = param(m, &format!("{name}.w"));
    let b = &param(m, &format!("{name}.b"))[0];
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| b[o] + row.iter().zip(&w).map(|(xi, wr)| xi * wr[o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| (0..w[0].len()).map(|o| row.iter().zip(w).map(|(a, wr)| a * wr[o]).sum()).collect())
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn mlp(m: &PolicyModel<f64>, x: &Mat, name: &str) -> Mat {
    let h = map(&linear(m, x, &format!("{name}.l1")), silu);
    linear(m, &h, &format!("{name}.l2"))
}

fn rms(row: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    row.iter().zip(g).map(|(v, g)| g * v * s).collect()
}

fn norm(m: &PolicyModel<f64>, x: &Mat, name: &str) -> Mat {
    let g = &param(m, name)[0];
    x.iter().map(|r| rms(r, g, m.config().norm_eps)).collect()
}

fn rotate(x: &[f64], pos: usize) -> Vec<f64> {
    let hd = x.len();
    let mut out = x.to_vec();
    for i in 0..hd / 2 {
        let th = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
        let (c, s) = (th.cos(), th.sin());
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn allowed(positions: &[usize], i: usize, j: usize, c: usize) -> bool {
    j <= i && i - j < c && positions[i] as i64 - positions[j] as i64 == i as i64 - j as i64
}

fn top_k(s: &[f64], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (e, &v) in s.iter().enumerate() {
            if picked.contains(&e) {
                continue;
            }
            if best.is_none_or(|b| v > s[b]) {
                best = Some(e);
            }
        }
        picked.push(best.unwrap());
    }
    picked
}

/// One segment of normalized observations at the given positions.
pub fn forward(m: &PolicyModel<f64>, obs: &Mat, positions: &[usize]) -> Reference {
    let cfg = m.config().clone();
    let n = obs.len();
    let hd = cfg.head_dim();
    let group = cfg.heads / cfg.kv_heads;
    let refs: Mat = obs.iter().map(|r| r[cfg.dims.ref_offset..cfg.dims.ref_offset + cfg.dims.ref_len].to_vec()).collect();
    let mut h = mlp(m, obs, "tok");
    let mut pre_moe = None;
    let mut selected = Vec::new();
    for l in 0..cfg.blocks {
        let p = format!("block{l}");
        let xn = norm(m, &h, &format!("{p}.attn_norm"));
        let q = matmul(&xn, &param(m, &format!("{p}.wq")));
        let k = matmul(&xn, &param(m, &format!("{p}.wk")));
        let v = matmul(&xn, &param(m, &format!("{p}.wv")));
        let qg = &param(m, &format!("{p}.q_norm"))[0];
        let kg = &param(m, &format!("{p}.k_norm"))[0];
        let mut heads = vec![vec![0.0; cfg.heads * hd]; n];
        for head in 0..cfg.heads {
            let kvh = head / group;
            let qh: Mat = (0..n).map(|t| rotate(&rms(&q[t][head * hd..(head + 1) * hd], qg, cfg.norm_eps), positions[t])).collect();
            let kh: Mat = (0..n).map(|t| rotate(&rms(&k[t][kvh * hd..(kvh + 1) * hd], kg, cfg.norm_eps), positions[t])).collect();
            for i in 0..n {
                let js: Vec<usize> = (0..n).filter(|&j| allowed(positions, i, j, cfg.context)).collect();
                let logits: Vec<f64> = js
                    .iter()
                    .map(|&j| qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for (wj, &j) in w.iter().zip(&js) {
                    for c in 0..hd {
                        heads[i][head * hd + c] += wj / z * v[j][kvh * hd + c];
                    }
                }
            }
        }
        let gate = map(&linear(m, &xn, &format!("{p}.gate")), sigmoid);
        let gated: Mat = heads.iter().zip(&gate).map(|(a, g)| a.iter().zip(g).map(|(x, y)| x * y).collect()).collect();
        h = add(&h, &matmul(&gated, &param(m, &format!("{p}.wo"))));
        if pre_moe.is_none() {
            pre_moe = Some(h.clone());
        }

        // Dense evaluation of every expert, masked by the routing weights.
        let u = norm(m, &h, &format!("{p}.moe_norm"));
        let scores = linear(m, &refs, &format!("{p}.router"));
        let all: Vec<Mat> = (0..cfg.experts).map(|e| mlp(m, &u, &format!("{p}.expert{e}"))).collect();
        let mut out = if cfg.shared_expert { mlp(m, &u, &format!("{p}.shared")) } else { vec![vec![0.0; cfg.d_model]; n] };
        let mut layer_sel = Vec::new();
        for t in 0..n {
            let sel = top_k(&scores[t], cfg.top_k);
            let z: f64 = sel.iter().map(|&e| scores[t][e].exp()).sum();
            for e in 0..cfg.experts {
                let a = if sel.contains(&e) { scores[t][e].exp() / z } else { 0.0 };
                for c in 0..cfg.d_model {
                    out[t][c] += a * all[e][t][c];
                }
            }
            layer_sel.push(sel);
        }
        selected.push(layer_sel);
        h = add(&h, &out);
    }
    let pre_moe = pre_moe.unwrap();
    let x = norm(m, &pre_moe, "aux.norm");
    let ls = param(m, "log_std")[0].iter().map(|s| s.clamp(ACTION_LOG_STD.0, ACTION_LOG_STD.1)).collect();
    Reference {
        mu: mlp(m, &norm(m, &h, "final_norm"), "head"),
        log_std: ls,
        vel_mu: linear(m, &x, "aux.vel_mu"),
        vel_log_std: map(&linear(m, &x, "aux.vel_log_std"), |s| s.clamp(VEL_STD.0.ln(), VEL_STD.1.ln())),
        contact: linear(m, &x, "aux.contact"),
        ref_pos: linear(m, &x, "aux.ref_pos"),
        robot_pos: linear(m, &x, "aux.robot_pos"),
        pre_moe,
        selected,
    }
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
