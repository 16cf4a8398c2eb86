mod common;

use common::loss_oracle as oracle;
use diffmath::{Binder, Graph, Tensor, Var};
use holomotion::policy::{select_top_k, LayerRoute, PolicyModel};
use holomotion::trainer::losses::{contact_bce, dead_expert_margin, position_mse, velocity_nll};
use holomotion::trainer::ppo::{self, Mode};
use holomotion::trainer::{AuxWeights, PpoConfig, RolloutBatch};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn mat(r: &mut ChaCha8Rng, n: usize, c: usize, lo: f64, hi: f64) -> Mat {
    (0..n).map(|_| (0..c).map(|_| r.random_range(lo..hi)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

fn mask_col(g: &mut Graph<f64>, mask: &[bool]) -> Var {
    g.constant(Tensor::column(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
    m[0] = true;
    m
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn default_weights() {
    let a = AuxWeights::default();
    assert_eq!((a.vel, a.contact, a.ref_pos, a.robot_pos, a.dead), (1e-2, 1e-2, 1e-1, 1e-1, 1e-1));
    assert_eq!(PpoConfig::default().aux, a);
}

#[test]
fn auxiliary_terms_match_scalar_loops() {
    let mut r = common::rng(1);
    for trial in 0..100 {
        let n = r.random_range(1..40);
        let k = r.random_range(1..8);
        let mask = random_mask(&mut r, n);
        let mut g = Graph::new();
        let m = mask_col(&mut g, &mask);
        let nv = mask.iter().filter(|&&x| x).count() as f64;

        let (mu, ls, tv) = (mat(&mut r, n, 3, -2.0, 2.0), mat(&mut r, n, 3, -3.0, 2.0), mat(&mut r, n, 3, -2.0, 2.0));
        let (a, b, c) = (g.constant(tensor(&mu)).unwrap(), g.constant(tensor(&ls)).unwrap(), g.constant(tensor(&tv)).unwrap());
        let v = velocity_nll(&mut g, a, b, c, m, nv).unwrap();
        let want = oracle::velocity_nll(&mu, &ls, &tv, &mask);
        assert!((scalar(&g, v) - want).abs() < 1e-9 * want.abs().max(1.0), "trial {trial}");

        let logits = mat(&mut r, n, k, -6.0, 6.0);
        let labels: Mat = mat(&mut r, n, k, 0.0, 1.0).into_iter().map(|row| row.into_iter().map(|x| (x > 0.5) as u8 as f64).collect()).collect();
        let (a, b) = (g.constant(tensor(&logits)).unwrap(), g.constant(tensor(&labels)).unwrap());
        let v = contact_bce(&mut g, a, b, m, nv).unwrap();
        assert!((scalar(&g, v) - oracle::contact_bce(&logits, &labels, &mask)).abs() < 1e-9);

        let (p, q) = (mat(&mut r, n, 3 * k, -1.0, 1.0), mat(&mut r, n, 3 * k, -1.0, 1.0));
        let (a, b) = (g.constant(tensor(&p)).unwrap(), g.constant(tensor(&q)).unwrap());
        let v = position_mse(&mut g, a, b, m, nv).unwrap();
        assert!((scalar(&g, v) - oracle::position_mse(&p, &q, &mask)).abs() < 1e-9);
    }
}

#[test]
fn degenerate_predictions() {
    let mut g = Graph::new();
    let t = tensor(&vec![vec![0.3, -0.2, 1.0]; 4]);
    let (a, b) = (g.constant(t.clone()).unwrap(), g.constant(t).unwrap());
    let z = g.constant(Tensor::zeros(4, 3)).unwrap();
    let m = mask_col(&mut g, &[true; 4]);
    let v = velocity_nll(&mut g, a, z, b, m, 4.0).unwrap();
    assert_eq!(scalar(&g, v), 0.0);

    let labels = tensor(&vec![vec![1.0, 0.0]; 4]);
    let logits = tensor(&vec![vec![40.0, -40.0]; 4]);
    let (l, c) = (g.constant(logits).unwrap(), g.constant(labels).unwrap());
    let v = contact_bce(&mut g, l, c, m, 4.0).unwrap();
    assert!(scalar(&g, v) < 1e-15);
}

fn route(g: &mut Graph<f64>, scores: &Mat, k: usize, var: bool) -> LayerRoute {
    let t = tensor(scores);
    let s = if var { g.variable(t).unwrap() } else { g.constant(t).unwrap() };
    LayerRoute { scores: s, decisions: scores.iter().map(|row| select_top_k(row, k).unwrap()).collect() }
}

#[test]
fn dead_expert_margin_matches_double_loop() {
    let mut r = common::rng(2);
    let mut active = 0;
    for _ in 0..200 {
        let layers = r.random_range(1..4);
        let experts = r.random_range(2..12);
        let k = r.random_range(1..=experts.min(3));
        let n = r.random_range(1..10);
        let mask = random_mask(&mut r, n);
        let scores: Vec<Mat> = (0..layers).map(|_| mat(&mut r, n, experts, -2.0, 2.0)).collect();
        let mut g = Graph::new();
        let routes: Vec<LayerRoute> = scores.iter().map(|s| route(&mut g, s, k, false)).collect();
        let got = dead_expert_margin(&mut g, &routes, &mask, experts).unwrap();
        let want = oracle::dead_expert(&scores, &mask, k);
        match got {
            Some(v) => {
                active += 1;
                assert!((scalar(&g, v) - want).abs() < 1e-9, "{} vs {want}", scalar(&g, v));
            }
            None => assert_eq!(want, 0.0),
        }
    }
    assert!(active > 100);
}

#[test]
fn dead_expert_gradient_pushes_dead_scores_up() {
    let mut r = common::rng(3);
    let (n, experts, k) = (5, 8, 2);
    let mask = vec![true, true, false, true, true];
    let scores = mat(&mut r, n, experts, -2.0, 2.0);
    let mut g = Graph::new();
    let rt = route(&mut g, &scores, k, true);
    let loss = dead_expert_margin(&mut g, std::slice::from_ref(&rt), &mask, experts).unwrap().unwrap();
    let grads = g.backward(loss).unwrap();
    let gs = grads.get(rt.scores).unwrap();
    let mut used = vec![false; experts];
    for (t, d) in rt.decisions.iter().enumerate() {
        if mask[t] {
            d.experts.iter().for_each(|&e| used[e] = true);
        }
    }
    let dead: Vec<usize> = (0..experts).filter(|&e| !used[e]).collect();
    let w = 1.0 / (4.0 * dead.len() as f64);
    for t in 0..n {
        for e in 0..experts {
            let want = if mask[t] && dead.contains(&e) && scores[t][e] < rt.decisions[t].tau { -w } else { 0.0 };
            assert!((gs.at(t, e) - want).abs() < 1e-12, "({t},{e})");
        }
    }
}

#[test]
fn dead_expert_edge_cases() {
    // Every expert used: no term.
    let scores = vec![vec![2.0, 1.0, 0.0, -1.0], vec![-1.0, 0.0, 1.0, 2.0]];
    let mut g = Graph::new();
    let rt = route(&mut g, &scores, 2, false);
    assert!(dead_expert_margin(&mut g, &[rt], &[true, true], 4).unwrap().is_none());

    // Expert 1 ties the threshold and adds nothing; expert 2 sits 2 below it.
    let scores = vec![vec![1.0, 1.0, -1.0]];
    let rt = route(&mut g, &scores, 1, false);
    let v = dead_expert_margin(&mut g, &[rt], &[true], 3).unwrap().unwrap();
    assert!((scalar(&g, v) - 1.0).abs() < 1e-12);
    let scores = vec![vec![3.0, 2.0, 0.0], vec![0.0, 4.0, 1.0]];
    let rt = route(&mut g, &scores, 1, false);
    let v = dead_expert_margin(&mut g, &[rt], &[true, true], 3).unwrap().unwrap();
    // Expert 2 is dead: gaps 3 and 3, averaged over 2 tokens.
    assert!((scalar(&g, v) - 3.0).abs() < 1e-12);
}

fn rows_of(g: &Graph<f64>, v: Var) -> Mat {
    let t = g.value(v);
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

#[test]
fn reported_components_match_oracles_on_model_outputs() {
    let m = PolicyModel::<f64>::new(common::desk()).unwrap();
    let mut r = common::rng(4);
    let mut b = RolloutBatch::random(&m.config().dims, 3, 8, &mut r);
    for i in [5, 6, 7, 20, 23] {
        b.valid[i] = false;
    }
    let cfg = PpoConfig::default();
    let rep = ppo::evaluate(&m, &b, &cfg, Mode::Sequence).unwrap();

    let mut g = Graph::new();
    let out = m.forward(&mut g, &mut Binder::frozen(), &b.seq_input()).unwrap();
    let vel = oracle::velocity_nll(&rows_of(&g, out.aux.vel_mu), &rows_of(&g, out.aux.vel_log_std), &to_mat(&b.base_vel), &b.valid);
    let con = oracle::contact_bce(&rows_of(&g, out.aux.contact_logits), &to_mat(&b.contacts), &b.valid);
    let rp = oracle::position_mse(&rows_of(&g, out.aux.ref_pos), &to_mat(&b.ref_pos), &b.valid);
    let bp = oracle::position_mse(&rows_of(&g, out.aux.robot_pos), &to_mat(&b.robot_pos), &b.valid);
    let scores: Vec<Mat> = out.routes.iter().map(|l| rows_of(&g, l.scores)).collect();
    let dead = oracle::dead_expert(&scores, &b.valid, m.config().top_k);
    assert!(dead > 0.0);
    for (got, want) in [(rep.vel, vel), (rep.contact, con), (rep.ref_pos, rp), (rep.robot_pos, bp), (rep.dead, dead)] {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert!((rep.total - rep.recombine(&cfg)).abs() < 1e-9);
}
