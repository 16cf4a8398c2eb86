//! Finite-difference cases for every differentiable primitive.

use diffmath::gradcheck::check;
use diffmath::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TRIALS: u64 = 20;

type Make = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    make: Make,
    build: Build,
}

fn rand_t(rng: &mut ChaCha8Rng, m: usize, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let (m, n) = g.dims(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(rand_t(&mut rng, m, n, -1.0, 1.0))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

impl Case {
    /// Worst relative error over the random trials.
    pub fn max_rel_err(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + self.name.len() as u64);
            let inputs = (self.make)(&mut rng);
            let report = check(&inputs, H, FLOOR, |g, v| {
                let y = (self.build)(g, v)?;
                weighted_sum(g, y, trial)
            })
            .unwrap();
            worst = worst.max(report.max_rel_err);
        }
        worst
    }
}

fn case(
    name: &'static str,
    tol: f64,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name, tol, make: Box::new(make), build: Box::new(build) }
}

fn one(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![rand_t(r, 4, 5, -1.0, 1.0)]
}

fn smooth(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![rand_t(r, 2, 5, -3.0, 3.0)]
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 3, 4, -1.0, 1.0)]
}

fn with_row(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 1, 4, -1.0, 1.0)]
}

pub fn all() -> Vec<Case> {
    vec![
        case("matmul", 1e-6, |r| vec![rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 4, 2, -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", 1e-6, |r| vec![rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 5, 4, -1.0, 1.0)], |g, v| g.matmul_nt(v[0], v[1])),
        case("softmax", 1e-6, |r| vec![rand_t(r, 1, 5, -2.0, 2.0)], |g, v| g.softmax_rows(v[0])),
        case("rmsnorm", 1e-4, |r| vec![rand_t(r, 3, 6, -1.0, 1.0), rand_t(r, 1, 6, 0.5, 1.5)], |g, v| g.rmsnorm_rows(v[0], v[1], 1e-6)),
        case("rope", 1e-6, |r| vec![rand_t(r, 3, 8, -1.0, 1.0)], |g, v| g.rope(v[0], &[0, 5, 17], 4)),
        // Values stay away from the kinks of relu, clamp and minimum.
        case("silu", 1e-6, smooth, |g, v| g.silu(v[0])),
        case("sigmoid", 1e-6, smooth, |g, v| g.sigmoid(v[0])),
        case("exp", 1e-6, smooth, |g, v| g.exp(v[0])),
        case("softplus", 1e-6, smooth, |g, v| g.softplus(v[0])),
        case("square", 1e-6, smooth, |g, v| g.square(v[0])),
        case("log", 1e-6, |r| vec![rand_t(r, 2, 5, 0.5, 3.0)], |g, v| g.log(v[0])),
        case(
            "relu",
            1e-6,
            |r| {
                let t = rand_t(r, 2, 5, 0.1, 2.0);
                let signs = rand_t(r, 2, 5, -1.0, 1.0);
                vec![Tensor::matrix(2, 5, t.data().iter().zip(signs.data()).map(|(a, s)| a * s.signum()).collect()).unwrap()]
            },
            |g, v| g.relu(v[0]),
        ),
        case(
            "clamp",
            1e-6,
            |r| {
                let t = rand_t(r, 1, 6, 0.1, 0.9);
                let d: Vec<f64> = t.data().iter().enumerate().map(|(i, &x)| if i % 2 == 0 { x } else { x + 1.5 }).collect();
                vec![Tensor::row(d)]
            },
            |g, v| g.clamp(v[0], -1.0, 1.0),
        ),
        case("add", 1e-6, pair, |g, v| g.add(v[0], v[1])),
        case("sub", 1e-6, pair, |g, v| g.sub(v[0], v[1])),
        case("mul", 1e-6, pair, |g, v| g.mul(v[0], v[1])),
        case(
            "minimum",
            1e-6,
            |r| {
                let a = rand_t(r, 3, 4, -1.0, 1.0);
                let gap = rand_t(r, 3, 4, 0.1, 0.5);
                let b: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(gap.data())
                    .enumerate()
                    .map(|(i, (x, d))| if i % 2 == 0 { x + d } else { x - d })
                    .collect();
                vec![a, Tensor::matrix(3, 4, b).unwrap()]
            },
            |g, v| g.minimum(v[0], v[1]),
        ),
        case("add_row", 1e-6, with_row, |g, v| g.add_row(v[0], v[1])),
        case("mul_row", 1e-6, with_row, |g, v| g.mul_row(v[0], v[1])),
        case("mul_col", 1e-6, |r| vec![rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 3, 1, -1.0, 1.0)], |g, v| g.mul_col(v[0], v[1])),
        case("scale", 1e-6, one, |g, v| g.scale(v[0], -2.5)),
        case("offset", 1e-6, one, |g, v| g.offset(v[0], 0.7)),
        case("slice_cols", 1e-6, one, |g, v| g.slice_cols(v[0], 1, 3)),
        case("slice_rows", 1e-6, one, |g, v| g.slice_rows(v[0], 1, 2)),
        case("gather_rows", 1e-6, one, |g, v| g.gather_rows(v[0], &[3, 0, 3, 2])),
        case("scatter_rows", 1e-6, one, |g, v| g.scatter_add_rows(v[0], &[1, 1, 0, 2], 3)),
        case("gather_elems", 1e-6, one, |g, v| g.gather_elems(v[0], &[(0, 1), (3, 4), (0, 1)])),
        case("sum_rows", 1e-6, one, |g, v| g.sum_rows(v[0])),
        case("sum_cols", 1e-6, one, |g, v| g.sum_cols(v[0])),
        case("mean", 1e-6, one, |g, v| g.mean(v[0])),
        case(
            "concat_cols",
            1e-6,
            |r| vec![rand_t(r, 2, 3, -1.0, 1.0), rand_t(r, 2, 2, -1.0, 1.0)],
            |g, v| g.concat_cols(&[v[0], v[1], v[0]]),
        ),
        case(
            "concat_rows",
            1e-6,
            |r| vec![rand_t(r, 2, 3, -1.0, 1.0), rand_t(r, 1, 3, -1.0, 1.0)],
            |g, v| g.concat_rows(&[v[1], v[0]]),
        ),
        case(
            "attention",
            1e-5,
            |r| vec![rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 3, 4, -1.0, 1.0), rand_t(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let q = g.rope(v[0], &[0, 1, 2], 4)?;
                let k = g.rope(v[1], &[0, 1, 2], 4)?;
                let s = g.matmul_nt(q, k)?;
                let mask = g.constant(Tensor::matrix(3, 3, vec![0.0, -1e9, -1e9, 0.0, 0.0, -1e9, 0.0, 0.0, 0.0]).unwrap())?;
                let s = g.add(s, mask)?;
                let p = g.softmax_rows(s)?;
                g.matmul(p, v[2])
            },
        ),
    ]
}
