use serde::{Deserialize, Serialize};

/// Smallest variance used when normalizing.
pub const VAR_FLOOR: f64 = 1e-6;

/// Per-feature running mean and variance.
///
/// The `n`-th update blends with weight `max(1/n, 1 - decay)`: an exact
/// cumulative average until the window fills, exponential afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
    pub decay: f64,
}

impl EmaNormalizer {
    /// Identity statistics: mean 0, variance 1.
    pub fn new(dim: usize, decay: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0,
            decay,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn weight(&self, n: u64) -> f64 {
        (1.0 / n as f64).max(1.0 - self.decay)
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "normalizer input width");
        self.count += 1;
        let a = self.weight(self.count);
        for ((m, v), &xi) in self.mean.iter_mut().zip(&mut self.var).zip(x) {
            let delta = xi - *m;
            *m += a * delta;
            *v = (1.0 - a) * (*v + a * delta * delta);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((&xi, m), v)| (xi - m) / v.max(VAR_FLOOR).sqrt())
            .collect()
    }
}
