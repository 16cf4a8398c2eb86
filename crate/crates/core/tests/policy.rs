mod common;

use diffmath::{Graph, Tensor};
use holomotion::policy::{count_params, gaussian, select_top_k, Checkpoint, EmaNormalizer, ModelConfig, PolicyModel};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn top_k_is_well_formed(scores in prop::collection::vec(-5.0f64..5.0, 1..20), k in 1usize..20) {
        let k = k.min(scores.len());
        let d = select_top_k(&scores, k).unwrap();
        prop_assert_eq!(d.experts.len(), k);
        let mut u = d.experts.clone();
        u.sort_unstable();
        u.dedup();
        prop_assert_eq!(u.len(), k);
        prop_assert!((d.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let min_sel = d.experts.iter().map(|&e| scores[e]).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(d.tau, min_sel);
        for e in 0..scores.len() {
            if !d.experts.contains(&e) {
                prop_assert!(scores[e] <= d.tau);
            }
        }
        let z: f64 = d.experts.iter().map(|&e| scores[e].exp()).sum();
        for (a, &e) in d.alpha.iter().zip(&d.experts) {
            prop_assert!((a - scores[e].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_the_lower_index(n in 2usize..12, k in 1usize..12) {
        let k = k.min(n);
        let d = select_top_k(&vec![0.25; n], k).unwrap();
        prop_assert_eq!(d.experts, (0..k).collect::<Vec<_>>());
    }
}

#[test]
fn full_selection_is_softmax_of_all_scores() {
    let s = [0.3, -1.0, 2.0, 0.7];
    let d = select_top_k(&s, 4).unwrap();
    assert_eq!(d.experts, vec![2, 3, 0, 1]);
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    for (a, &e) in d.alpha.iter().zip(&d.experts) {
        assert!((a - s[e].exp() / z).abs() < 1e-12);
    }
    assert_eq!(select_top_k(&s, 1).unwrap().alpha, vec![1.0]);
    assert!(select_top_k(&s, 5).is_err());
    assert!(select_top_k(&s, 0).is_err());
}

#[test]
fn router_ignores_proprioceptive_features() {
    let m = PolicyModel::<f64>::new(common::desk()).unwrap();
    let dims = m.config().dims;
    let mut r = common::rng(3);
    let obs = common::random_obs::<f64>(&mut r, 1000, dims.obs_dim);
    let mut perturbed = obs.clone();
    for t in 0..1000 {
        for c in (0..dims.obs_dim).filter(|c| !(dims.ref_offset..dims.ref_offset + dims.ref_len).contains(c)) {
            perturbed.data_mut()[t * dims.obs_dim + c] += r.random_range(-5.0..5.0);
        }
    }
    assert_eq!(m.route(&obs).unwrap(), m.route(&perturbed).unwrap());

    // Routing inside the full forward agrees with the reference-only path.
    let mut g = Graph::new();
    let out = m
        .forward(&mut g, &mut diffmath::Binder::frozen(), &holomotion::policy::SeqInput::single(perturbed.clone(), vec![0; 1000]))
        .unwrap();
    let routed = m.route(&obs).unwrap();
    for (l, route) in out.routes.iter().enumerate() {
        assert_eq!(route.decisions, routed[l]);
    }
}

#[test]
fn identical_references_route_identically() {
    let m = PolicyModel::<f64>::new(common::desk()).unwrap();
    let dims = m.config().dims;
    let mut r = common::rng(4);
    let mut obs = common::random_obs::<f64>(&mut r, 1000, dims.obs_dim);
    let ref0: Vec<f64> = obs.row_slice(0)[dims.ref_offset..dims.ref_offset + dims.ref_len].to_vec();
    for t in (0..1000).step_by(2) {
        obs.data_mut()[t * dims.obs_dim + dims.ref_offset..t * dims.obs_dim + dims.ref_offset + dims.ref_len].copy_from_slice(&ref0);
    }
    for layer in m.route(&obs).unwrap() {
        for t in (0..1000).step_by(2) {
            assert_eq!(layer[t], layer[0]);
        }
    }
}

#[test]
fn gaussian_log_prob_closed_forms() {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    assert!((gaussian::log_prob(&[0.4, -1.0, 2.0], &[0.4, -1.0, 2.0], &[0.0; 3]) + 1.5 * ln2pi).abs() < 1e-12);
    let mut r = common::rng(5);
    for _ in 0..200 {
        let j = r.random_range(1..6);
        let v = |r: &mut rand_chacha::ChaCha8Rng, a: f64| (0..j).map(|_| r.random_range(-a..a)).collect::<Vec<f64>>();
        let (a, mu, ls) = (v(&mut r, 2.0), v(&mut r, 2.0), v(&mut r, 1.0));
        let mut want = 0.0;
        for i in 0..j {
            let s = ls[i].exp();
            want += -(a[i] - mu[i]).powi(2) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        }
        assert!((gaussian::log_prob(&a, &mu, &ls) - want).abs() < 1e-10);
        let ent: f64 = ls.iter().map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + s).sum();
        assert!((gaussian::entropy(&ls) - ent).abs() < 1e-12);

        // ∂/∂μ against finite differences.
        for i in 0..j {
            let h = 1e-6;
            let mut up = mu.clone();
            up[i] += h;
            let mut dn = mu.clone();
            dn[i] -= h;
            let num = (gaussian::log_prob(&a, &up, &ls) - gaussian::log_prob(&a, &dn, &ls)) / (2.0 * h);
            let ana = (a[i] - mu[i]) / (2.0 * ls[i]).exp();
            assert!((num - ana).abs() / (num.abs() + ana.abs()).max(1e-6) < 1e-5);
        }
    }
}

#[test]
fn row_log_probs_match_scalar_form() {
    let mut r = common::rng(6);
    let mu = common::random_obs::<f64>(&mut r, 7, 3);
    let act = common::random_obs::<f64>(&mut r, 7, 3);
    let ls = Tensor::row(vec![-0.3, 0.2, 0.9]);
    let mut g = Graph::new();
    let (m, l, a) = (g.constant(mu.clone()).unwrap(), g.constant(ls.clone()).unwrap(), g.constant(act.clone()).unwrap());
    let lp = gaussian::log_prob_rows(&mut g, m, l, a).unwrap();
    let e = gaussian::entropy_graph(&mut g, l).unwrap();
    for t in 0..7 {
        let want = gaussian::log_prob(act.row_slice(t), mu.row_slice(t), ls.data());
        assert!((g.value(lp).data()[t] - want).abs() < 1e-12);
    }
    assert!((g.value(e).data()[0] - gaussian::entropy(ls.data())).abs() < 1e-12);
}

#[test]
fn sampling_mean_is_within_three_standard_errors() {
    let mut r = common::rng(7);
    let (mu, ls) = ([0.5, -1.0, 2.0], [0.0f64, -1.0, 0.5]);
    let n = 100_000;
    let mut sum = [0.0; 3];
    for _ in 0..n {
        for (s, x) in sum.iter_mut().zip(gaussian::sample(&mu, &ls, &mut r)) {
            *s += x;
        }
    }
    for i in 0..3 {
        let tol = 3.0 * ls[i].exp() / (n as f64).sqrt();
        assert!((sum[i] / n as f64 - mu[i]).abs() < tol, "dim {i}");
    }
}

#[test]
fn ema_matches_streaming_moments() {
    let mut r = common::rng(8);
    let dim = 5;
    let decay = 0.999;
    let mut ema = EmaNormalizer::new(dim, decay);
    let xs: Vec<Vec<f64>> = (0..3000).map(|_| (0..dim).map(|c| r.random_range(-3.0..3.0) * (c + 1) as f64 + c as f64).collect()).collect();
    for (n, x) in xs.iter().enumerate() {
        ema.update(x);
        let n = n + 1;
        if n <= 1000 {
            // Exact population moments of everything seen so far.
            for c in 0..dim {
                let mean = xs[..n].iter().map(|x| x[c]).sum::<f64>() / n as f64;
                let var = xs[..n].iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / n as f64;
                assert!((ema.mean[c] - mean).abs() < 1e-8, "n={n}");
                assert!((ema.var[c] - var).abs() < 1e-8 * var.max(1.0), "n={n}");
            }
        }
    }
    // Past the window: independent exponential recursion from the n=1000 state.
    let mut check = EmaNormalizer::new(dim, decay);
    for x in &xs[..1000] {
        check.update(x);
    }
    let (mut mean, mut var) = (check.mean.clone(), check.var.clone());
    let a = 1.0 - decay;
    for x in &xs[1000..] {
        for c in 0..dim {
            let d = x[c] - mean[c];
            mean[c] += a * d;
            var[c] = (1.0 - a) * (var[c] + a * d * d);
        }
    }
    for c in 0..dim {
        assert!((ema.mean[c] - mean[c]).abs() < 1e-9 && (ema.var[c] - var[c]).abs() < 1e-9);
    }
    let z = ema.normalize(&xs[0]);
    for c in 0..dim {
        assert!((z[c] - (xs[0][c] - ema.mean[c]) / ema.var[c].sqrt()).abs() < 1e-12);
    }
}

#[test]
fn fresh_normalizer_is_identity_and_floors_variance() {
    let n = EmaNormalizer::new(3, 0.999);
    assert_eq!(n.normalize(&[1.5, -2.0, 0.0]), vec![1.5, -2.0, 0.0]);
    let mut c = EmaNormalizer::new(1, 0.999);
    c.update(&[4.0]);
    assert_eq!(c.var[0], 0.0);
    assert!((c.normalize(&[4.001])[0] - 1.0).abs() < 1e-9);
}

/// Independent parameter formula for the deployable actor.
fn actor_formula(c: &ModelConfig) -> (usize, usize) {
    let d = c.d_model;
    let hd = c.head_dim();
    let lin = |i: usize, o: usize| i * o + o;
    let tok = lin(c.dims.obs_dim, c.tokenizer_hidden) + lin(c.tokenizer_hidden, d);
    let attn = d + d * c.heads * hd + 2 * d * c.kv_heads * hd + 2 * hd + lin(d, c.heads * hd) + c.heads * hd * d;
    let expert = lin(d, c.expert_hidden) + lin(c.expert_hidden, d);
    let per_block_dense = attn + d + lin(c.dims.ref_len, c.experts) + if c.shared_expert { expert } else { 0 };
    let head = d + lin(d, c.head_hidden) + lin(c.head_hidden, c.dims.action_dim) + c.dims.action_dim;
    let dense = tok + c.blocks * per_block_dense + head;
    (dense + c.blocks * c.experts * expert, dense + c.blocks * c.top_k * expert)
}

#[test]
fn paper_configuration_activates_under_five_percent() {
    let dims = holomotion::policy::InterfaceDims { obs_dim: 380, critic_dim: 420, ref_offset: 100, ref_len: 280, action_dim: 29, contact_bodies: 14, pos_bodies: 14 };
    let cfg = ModelConfig::paper(dims);
    let c = count_params(&cfg);
    assert_eq!((c.total, c.activated), actor_formula(&cfg));
    assert!(c.activated_fraction() < 0.05, "fraction {}", c.activated_fraction());
}

#[test]
fn counts_cover_every_allocated_scalar() {
    for cfg in [common::tiny(), common::desk()] {
        let c = count_params(&cfg);
        let m = PolicyModel::<f64>::new(cfg.clone()).unwrap();
        assert_eq!(c.total + c.training_only, m.params.num_scalars());
        assert_eq!((c.total, c.activated), actor_formula(&cfg));
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let mut m = PolicyModel::<f32>::new(common::desk()).unwrap();
    let mut r = common::rng(9);
    for _ in 0..10 {
        let x: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        m.obs_norm.update(&x);
    }
    let mut ck = Checkpoint::from_model(&m);
    ck.push("adam/m0", Tensor::row(vec![1.0, 2.0]));
    ck.meta = serde_json::json!({"iteration": 3});
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let m2: PolicyModel<f32> = back.model(Some(&common::desk())).unwrap();
    for id in m.params.ids() {
        assert_eq!(m.params.get(id), m2.params.get(id));
    }
    assert_eq!(m.obs_norm, m2.obs_norm);

    let other = ModelConfig { experts: 8, ..common::desk() };
    let err = back.model::<f32>(Some(&other)).err().expect("config mismatch must fail").to_string();
    assert!(err.contains("mismatch"), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
    let bytes = ck.encode().unwrap();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}
