use diffmath::{ParamStore, Real, Tensor};

/// Adam with decoupled weight decay; moments kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, lr: f64, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; parameters without a gradient still decay.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = grads[k].as_ref();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |t| t.data()[i].f64());
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let xv = x.f64();
                *x = T::of(xv - self.lr * (upd + self.weight_decay * xv));
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data().iter().map(|x| x.f64() * x.f64()))
        .sum::<f64>()
        .sqrt();
    if max > 0.0 && norm > max {
        let s = T::of(max / norm);
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
