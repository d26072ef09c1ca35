use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucoh_core::model::Session;
use ucoh_core::net::{lightweight_conv, KernelNorm};
use ucoh_core::trainer::{pair_loss, total_loss, Reduction, TrainConfig};
use ucoh_core::verify::{check_model, check_total_loss_gradient, random_document, shuffled};
use ucoh_core::{reference, CoherenceModel, Doc, Document};
use ucoh_tensor::{grad_check, Graph, Precision, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lm(model: &CoherenceModel, doc: &Document) -> f64 {
    let mut g = Graph::new();
    let mut s = Session::new(&model.arch, &model.store, &mut g);
    let (v, _) = s.lm_loss(doc).unwrap();
    g.item(v).unwrap()
}

fn loss(model: &CoherenceModel, pos: &Document, neg: &Document, tau: f64) -> f64 {
    let mut g = Graph::new();
    let mut s = Session::new(&model.arch, &model.store, &mut g);
    let v = pair_loss(&mut s, pos, neg, tau).unwrap();
    g.item(v).unwrap()
}

#[test]
fn total_loss_gradient() {
    let mut model = check_model(3, true).unwrap();
    let mut r = rng(3);
    let pos = random_document(&mut r, 3, 20, 4);
    let neg = shuffled(&mut r, &pos);
    let report = check_total_loss_gradient(&mut model, &pos, &neg, &TrainConfig::default(), Precision::F64).unwrap();
    assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
    let cfg = TrainConfig { lm_reduction: Reduction::Sum, tau: 2.0, ..TrainConfig::default() };
    let report = check_total_loss_gradient(&mut model, &pos, &neg, &cfg, Precision::F64).unwrap();
    assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
}

#[test]
fn lm_loss_gradient() {
    let mut model = check_model(4, true).unwrap();
    let doc = random_document(&mut rng(4), 2, 20, 5);
    let arch = model.arch.clone();
    let report = grad_check(&mut model.store, 1e-5, Precision::F64, |g, s| {
        let mut sess = Session::new(&arch, s, g);
        Ok::<_, ucoh_core::Error>(sess.lm_loss(&doc)?.0)
    })
    .unwrap();
    assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
}

#[test]
fn reduced_precision_check_is_worse() {
    let mut model = check_model(5, true).unwrap();
    let mut r = rng(5);
    let pos = random_document(&mut r, 3, 20, 4);
    let neg = shuffled(&mut r, &pos);
    let cfg = TrainConfig::default();
    let hi = check_total_loss_gradient(&mut model, &pos, &neg, &cfg, Precision::F64).unwrap();
    let lo = check_total_loss_gradient(&mut model, &pos, &neg, &cfg, Precision::F32).unwrap();
    assert!(lo.max_rel_err() > 1e-4);
    assert!(lo.max_rel_err() > 100.0 * hi.max_rel_err());
}

#[test]
fn matches_reference_on_random_instances() {
    let mut r = rng(6);
    for i in 0..20 {
        let model = check_model(100 + i, i % 3 != 0).unwrap();
        let n = r.gen_range(1..7);
        let doc = random_document(&mut r, n, 20, 5);
        let fast = model.window_scores(&doc).unwrap();
        let slow = reference::window_scores(&model, &doc).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert!((lm(&model, &doc) - reference::lm_loss(&model, &doc).unwrap()).abs() <= 1e-9);
    }
}

#[test]
fn global_features_match_reference() {
    let model = check_model(7, true).unwrap();
    let mut r = rng(7);
    let h: Vec<Vec<f64>> = (0..5).map(|_| (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let mut g = Graph::new();
    let net = model.arch.net.vars(&mut g, &model.store);
    let flat: Vec<f64> = h.iter().flatten().copied().collect();
    let hv = g.constant(Tensor::new(&[5, 12], flat).unwrap());
    let u = ucoh_core::net::global_features(&mut g, hv, &net.conv, KernelNorm::Softmax).unwrap();
    let expect = reference::global_features(&model, &h);
    for (a, b) in g.value(u).data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12);
    }
    // A single row is its own mean.
    let one = g.constant(Tensor::new(&[1, 12], h[0].clone()).unwrap());
    let u1 = ucoh_core::net::global_features(&mut g, one, &net.conv, KernelNorm::Softmax).unwrap();
    assert_eq!(g.value(u1).data(), reference::global_features(&model, &h[..1]));
}

#[test]
fn group_sharing() {
    let (n, d, groups, k) = (4, 6, 3, 3);
    let mut r = rng(8);
    let x = Tensor::uniform(&[n, d], -1.0, 1.0, &mut r).unwrap();
    let w = Tensor::uniform(&[groups, k], -1.0, 1.0, &mut r).unwrap();
    let run = |w: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let o = lightweight_conv(&mut g, xv, wv, KernelNorm::Softmax).unwrap();
        g.value(o).data().to_vec()
    };
    let base = run(&w);
    for grp in 0..groups {
        let mut w2 = w.clone();
        w2.data_mut()[grp * k + 1] += 0.5;
        let out = run(&w2);
        for i in 0..n {
            for c in 0..d {
                let changed = out[i * d + c] != base[i * d + c];
                assert_eq!(changed, c / (d / groups) == grp, "row {i} channel {c}");
            }
        }
    }
}

#[test]
fn windows_are_local_without_global_features() {
    let model = check_model(9, false).unwrap();
    let mut r = rng(9);
    let doc = random_document(&mut r, 7, 20, 4);
    let base = model.window_scores(&doc).unwrap();
    for edit in 0..7 {
        let mut d2 = doc.clone();
        d2.sentences[edit] = vec![19, 18, 17];
        let y = model.window_scores(&d2).unwrap();
        for i in 0..7 {
            if !(i..i + 3).contains(&edit) {
                assert_eq!(y[i], base[i], "window {i}, edit {edit}");
            }
        }
        // Windows built from two real sentences do react to either of them.
        if edit < 6 {
            assert_ne!(y[edit], base[edit]);
        }
    }
}

#[test]
fn lm_terms_are_causal() {
    // Changing the last token leaves forward predictions of earlier tokens
    // alone, so only the final forward term and the backward terms move.
    let model = check_model(10, true).unwrap();
    let a = Doc::new("a", vec![vec![5, 6, 7, 8]]);
    let b = Doc::new("b", vec![vec![5, 6, 7, 9]]);
    let prefix = |doc: &Document| {
        let mut g = Graph::new();
        let mut s = Session::new(&model.arch, &model.store, &mut g);
        let rep = s.sentence(&doc.sentences[0]).unwrap().clone();
        let head = s.enc.lm_fwd;
        let states = g.concat(&rep.fwd[0..3], 0).unwrap();
        let logits = g.matmul(states, head.weight).unwrap();
        let logits = g.add_row_bias(logits, head.bias).unwrap();
        let lp = g.log_softmax(logits, 1).unwrap();
        let picked = g.pick(lp, &[5, 6, 7]).unwrap();
        g.value(picked).data().to_vec()
    };
    assert_eq!(prefix(&a), prefix(&b));
    assert_ne!(lm(&model, &a), lm(&model, &b));
}

#[test]
fn pair_loss_examples() {
    let mut model = check_model(11, true).unwrap();
    let doc = random_document(&mut rng(11), 1, 20, 3);
    let other = Doc::new("o", vec![vec![9, 9]]);
    // With zero scoring weights, y = b for every window.
    model.store.get_mut(model.arch.net.score_weight).data_mut().fill(0.0);
    let mut with_bias = |b: f64| {
        model.store.get_mut(model.arch.net.score_bias).data_mut()[0] = b;
        model.clone()
    };
    let m02 = with_bias(0.2);
    let y_pos = m02.score(&doc).unwrap();
    assert!((y_pos - 0.2).abs() < 1e-15);
    // Scores equal on both sides: the hinge reduces to the margin.
    assert!((loss(&m02, &doc, &other, 1.0) - 1.0).abs() < 1e-12);
    assert_eq!(loss(&m02, &doc, &doc, 1.0), 0.0);
}

#[test]
fn hinge_arithmetic() {
    // n = 1, tau = 1, score(pos) = 0.2, score(neg) = 0.5: the two windows
    // differ so the loss is max(0, 1 - 0.2 + 0.5).
    let mut g = Graph::new();
    let phi = g.constant(Tensor::vector(vec![1.0]).unwrap());
    let pos = g.constant(Tensor::vector(vec![0.2]).unwrap());
    let neg = g.constant(Tensor::vector(vec![0.5]).unwrap());
    let diff = g.sub(neg, pos).unwrap();
    let x = g.add(phi, diff).unwrap();
    let h = g.relu(x);
    assert!((g.value(h).data()[0] - 1.3).abs() < 1e-12);
}

#[test]
fn lm_switch_and_identity() {
    let model = check_model(12, true).unwrap();
    let mut r = rng(12);
    let pos = random_document(&mut r, 4, 20, 4);
    let neg = shuffled(&mut r, &pos);
    let parts = |cfg: &TrainConfig, a: &Document, b: &Document| {
        let mut g = Graph::new();
        let mut s = Session::new(&model.arch, &model.store, &mut g);
        let p = total_loss(&mut s, a, b, cfg).unwrap();
        (g.item(p.total).unwrap(), g.item(p.rank).unwrap(), p.lm.map(|v| g.item(v).unwrap()))
    };
    let off = TrainConfig { use_lm: false, ..TrainConfig::default() };
    let (t, rk, l) = parts(&off, &pos, &neg);
    assert_eq!(t, rk);
    assert!(l.is_none());
    let sum = TrainConfig { lm_reduction: Reduction::Sum, ..TrainConfig::default() };
    let (t, rk, l) = parts(&sum, &pos, &pos);
    assert_eq!(rk, 0.0);
    assert!(t > 0.0);
    assert!((t - lm(&model, &pos)).abs() < 1e-12);
    assert_eq!(l, Some(t));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn siamese_zero(seed in any::<u64>(), n in 1usize..6, global in any::<bool>()) {
        let model = check_model(seed, global).unwrap();
        let doc = random_document(&mut rng(seed), n, 20, 5);
        prop_assert_eq!(loss(&model, &doc, &doc, 1.0), 0.0);
    }

    #[test]
    fn lm_ignores_sentence_order(seed in any::<u64>(), n in 2usize..7) {
        let model = check_model(seed, true).unwrap();
        let mut r = rng(seed);
        let doc = random_document(&mut r, n, 20, 5);
        let perm = shuffled(&mut r, &doc);
        prop_assert!((lm(&model, &doc) - lm(&model, &perm)).abs() <= 1e-9);
    }

    #[test]
    fn loss_is_monotone_in_tau(seed in any::<u64>(), n in 2usize..6, t1 in 0.01f64..2.0, extra in 0.0f64..2.0) {
        let model = check_model(seed, true).unwrap();
        let mut r = rng(seed);
        let pos = random_document(&mut r, n, 20, 4);
        let neg = shuffled(&mut r, &pos);
        let a = loss(&model, &pos, &neg, t1);
        let b = loss(&model, &pos, &neg, t1 + extra);
        prop_assert!(a >= 0.0);
        prop_assert!(b >= a);
    }

    #[test]
    fn rep_width_is_2p(seed in any::<u64>(), m in 1usize..9) {
        let model = check_model(seed, true).unwrap();
        let tokens: Vec<u32> = (0..m as u32).map(|i| 4 + i % 16).collect();
        let mut g = Graph::new();
        let mut s = Session::new(&model.arch, &model.store, &mut g);
        let h = s.sentence(&tokens).unwrap().h;
        prop_assert_eq!(g.shape(h), &[1, 12]);
    }
}
