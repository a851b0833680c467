//! Loss values against hand computations and naive loops, gradients, and
//! invariances.

mod common;

use common::oracles::naive_intra;
use gencond::losses::{
    adv_losses, class_means, cls_loss, condensation_loss, condensation_total, feature_match_loss, inter_loss,
    intra_loss, intra_loss_single, LossWeights, Targets, Terms,
};
use gencond::Error;
use gencond_tensor::gradcheck::check;
use gencond_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rnd(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(rng, shape.to_vec(), std)
}

#[test]
fn balanced_discriminator_hand_values() {
    let g = Graph::new();
    let p = g.constant(Tensor::new([1], vec![0.5]));
    let (d, gl) = adv_losses(p, p);
    assert!((d.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((gl.item() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn adversarial_extremes_are_clamped() {
    let g = Graph::new();
    let real = g.constant(Tensor::new([2], vec![1.0, 1.0]));
    let fake = g.constant(Tensor::new([2], vec![0.0, 0.0]));
    let (d, gl) = adv_losses(real, fake);
    assert!(d.item() < 1e-6);
    assert!(gl.item().is_finite() && gl.item() > 15.0);
    let (_, g_perfect) = adv_losses(real, real);
    assert!(g_perfect.item() < 1e-6);
}

#[test]
fn uniform_logits_cost_ln_classes() {
    let g = Graph::new();
    let logits = g.constant(Tensor::zeros([4, 10]));
    let l = cls_loss(logits, &Targets::Hard(vec![0, 3, 9, 2])).unwrap();
    assert!((l.item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn soft_target_hand_value() {
    let g = Graph::new();
    let logits = g.constant(Tensor::new([1, 3], vec![1.0, 0.0, 0.0]));
    let t = Targets::Soft(Tensor::new([1, 3], vec![0.5, 0.25, 0.25]));
    let l = cls_loss(logits, &t).unwrap().item();
    let z = 1f64.exp() + 2.0;
    let expect = -(0.5 * (1f64.exp() / z).ln() + 0.25 * (1.0 / z).ln() + 0.25 * (1.0 / z).ln());
    assert!((l - expect).abs() < 1e-12);
}

#[test]
fn soft_targets_must_sum_to_one() {
    let g = Graph::new();
    let logits = g.constant(Tensor::zeros([1, 3]));
    let t = Targets::Soft(Tensor::new([1, 3], vec![0.5, 0.25, 0.2]));
    assert!(matches!(cls_loss(logits, &t), Err(Error::Argument(_))));
}

#[test]
fn feature_match_hand_value_and_layer_check() {
    let g = Graph::new();
    let s = g.constant(Tensor::new([1, 2], vec![1.0, 0.0]));
    let t = g.constant(Tensor::new([1, 2], vec![0.0, 1.0]));
    assert_eq!(feature_match_loss(&[s], &[t]).unwrap().item(), 2.0);
    assert_eq!(feature_match_loss(&[s], &[s]).unwrap().item(), 0.0);
    assert!(matches!(feature_match_loss(&[s, s], &[t]), Err(Error::Shape(_))));
}

#[test]
fn intra_hand_values() {
    let g = Graph::new();
    let f = g.constant(Tensor::new([2], vec![1.0, 0.0]));
    let c = g.constant(Tensor::new([2], vec![0.0, 1.0]));
    let neg = g.constant(Tensor::new([1, 2], vec![0.0, 1.0]));
    let l = intra_loss_single(&g, f, c, neg, 1.0).unwrap();
    assert!((l.item() - 2f64.ln()).abs() < 1e-12);
    let none = g.constant(Tensor::zeros([0, 2]));
    assert_eq!(intra_loss_single(&g, f, c, none, 0.1).unwrap().item(), 0.0);
    // a lone sample in the batched form has no negatives either
    let fb = g.constant(Tensor::new([1, 2], vec![3.0, -1.0]));
    let cb = g.constant(Tensor::new([1, 2], vec![0.5, 2.0]));
    assert_eq!(intra_loss(fb, cb, &[0], 0.1, false).unwrap().item(), 0.0);
}

#[test]
fn intra_batched_matches_per_sample_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let b = rng.random_range(2..8);
        let w = rng.random_range(1..6);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let f = rnd(&mut rng, &[b, w], 0.5);
        let c = rnd(&mut rng, &[b, w], 0.5);
        let g = Graph::new();
        let got = intra_loss(g.constant(f.clone()), g.constant(c.clone()), &labels, 0.3, false)
            .unwrap()
            .item();
        let mut expect = 0.0;
        for i in 0..b {
            let negs: Vec<&[f64]> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).map(|j| f.row(j)).collect();
            expect += naive_intra(f.row(i), c.row(i), &negs, 0.3);
        }
        expect /= b as f64;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }
}

#[test]
fn intra_is_finite_at_huge_similarity() {
    let g = Graph::new();
    let f = g.constant(Tensor::new([2], vec![100.0, 0.0]));
    let c = g.constant(Tensor::new([2], vec![100.0, 0.0]));
    let neg = g.constant(Tensor::new([1, 2], vec![99.0, 0.0]));
    let l = intra_loss_single(&g, f, c, neg, 1.0).unwrap().item();
    assert!(l.is_finite());
    assert!(naive_intra(&[100.0, 0.0], &[100.0, 0.0], &[&[99.0, 0.0]], 1.0).is_nan());
}

#[test]
fn inter_hand_values() {
    let g = Graph::new();
    let same = g.constant(Tensor::zeros([3, 4]));
    assert_eq!(inter_loss(same, 1.0).item(), 6.0);
    let two = g.constant(Tensor::new([2, 1], vec![0.0, 0.25]));
    assert!((inter_loss(two, 1.0).item() - 1.5).abs() < 1e-12);
    let far = g.constant(Tensor::new([2, 1], vec![0.0, 5.0]));
    assert_eq!(inter_loss(far, 1.0).item(), 0.0);
    let one = g.constant(Tensor::zeros([1, 4]));
    assert_eq!(inter_loss(one, 1.0).item(), 0.0);
}

#[test]
fn class_means_average_members() {
    let g = Graph::new();
    let f = g.constant(Tensor::new([4, 1], vec![1.0, 3.0, 10.0, 5.0]));
    let (m, present) = class_means(f, &[2, 0, 2, 0]);
    assert_eq!(present, vec![0, 2]);
    assert_eq!(m.value().data(), &[4.0, 5.5]);
}

#[test]
fn condensation_total_sums_and_flags_nan() {
    let w = LossWeights::default();
    let parts = Terms {
        adv: 1.0,
        cls: 0.0,
        feat: 2.0,
        intra: 3.0,
        inter: 4.0,
    };
    assert_eq!(condensation_total(&parts, &w).unwrap(), 10.0);
    assert_eq!(condensation_total(&Terms::default(), &w).unwrap(), 0.0);
    let bad = Terms { intra: f64::NAN, ..parts };
    match condensation_total(&bad, &w) {
        Err(Error::Divergence { term, .. }) => assert_eq!(term, "L_intra"),
        other => panic!("expected divergence, got {other:?}"),
    }
    let no_intra = LossWeights { intra: 0.0, ..w };
    assert_eq!(condensation_total(&parts, &no_intra).unwrap(), 7.0);

    let g = Graph::new();
    let vars = parts.map(|v| g.constant(Tensor::scalar(v)));
    assert_eq!(condensation_loss(&g, &vars, &no_intra).unwrap().item(), 7.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = [0usize, 1, 0, 0, 1];
    let f = rnd(&mut rng, &[5, 3], 0.7);
    let c = rnd(&mut rng, &[5, 3], 0.7);
    let r = check(|_, v| intra_loss(v[0], v[1], &labels, 0.5, false).unwrap(), &[f.clone(), c.clone()], 1e-6);
    assert!(r.max_rel_error() < 1e-4, "{}", r.max_rel_error());
    let r = check(|_, v| intra_loss(v[0], v[1], &labels, 0.5, true).unwrap(), &[f.clone(), c], 1e-6);
    assert!(r.max_rel_error() < 1e-4, "{}", r.max_rel_error());

    let means = rnd(&mut rng, &[4, 3], 0.4);
    let r = check(|_, v| inter_loss(v[0], 1.0), &[means], 1e-6);
    assert!(r.max_rel_error() < 1e-4, "{}", r.max_rel_error());

    let logits = rnd(&mut rng, &[3, 4], 1.0);
    let soft = Tensor::new([3, 4], vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 1.0, 0.0, 0.0, 0.0]);
    let r = check(move |_, v| cls_loss(v[0], &Targets::Soft(soft.clone())).unwrap(), &[logits], 1e-6);
    assert!(r.max_rel_error() < 1e-4);

    let real = Tensor::new([3], vec![0.2, 0.7, 0.9]);
    let fake = Tensor::new([3], vec![0.4, 0.1, 0.6]);
    let r = check(
        |_, v| {
            let (d, gl) = adv_losses(v[0], v[1]);
            d.add(gl)
        },
        &[real, fake],
        1e-7,
    );
    assert!(r.max_rel_error() < 1e-4);

    let s1 = rnd(&mut rng, &[2, 2, 3, 3], 1.0);
    let t1 = rnd(&mut rng, &[1, 2, 3, 3], 1.0);
    let s2 = rnd(&mut rng, &[2, 4], 1.0);
    let t2 = rnd(&mut rng, &[2, 4], 1.0);
    let r = check(|_, v| feature_match_loss(&[v[0], v[2]], &[v[1], v[3]]).unwrap(), &[s1, t1, s2, t2], 1e-6);
    assert!(r.max_rel_error() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn intra_monotone_in_similarities(pos in -2.0f64..2.0, neg in -2.0f64..2.0, delta in 0.01f64..1.0) {
        // 1-D features make each similarity a single product we can nudge directly.
        let eval = |p: f64, n: f64| {
            let g = Graph::new();
            let f = g.constant(Tensor::new([1], vec![1.0]));
            let c = g.constant(Tensor::new([1], vec![p]));
            let negs = g.constant(Tensor::new([1, 1], vec![n]));
            intra_loss_single(&g, f, c, negs, 0.5).unwrap().item()
        };
        let base = eval(pos, neg);
        prop_assert!(base >= 0.0);
        prop_assert!(eval(pos, neg + delta) > base);
        prop_assert!(eval(pos + delta, neg) < base);
    }

    #[test]
    fn inter_translation_and_permutation_invariant(seed in 0u64..500, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rnd(&mut rng, &[4, 3], 0.5);
        let g = Graph::new();
        let base = inter_loss(g.constant(m.clone()), 1.0).item();
        let moved = inter_loss(g.constant(m.map(|v| v + shift)), 1.0).item();
        let perm = inter_loss(g.constant(m.select_rows(&[2, 0, 3, 1])), 1.0).item();
        prop_assert!((base - moved).abs() < 1e-9);
        prop_assert!((base - perm).abs() < 1e-12);
    }

    #[test]
    fn feature_match_depends_only_on_association_mean(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assoc = rnd(&mut rng, &[5, 3], 1.0);
        let synth = rnd(&mut rng, &[1, 3], 1.0);
        let mean = |t: &Tensor| {
            let g = Graph::new();
            let m = g.constant(t.clone()).mean_axes(&[0]).value().clone();
            m
        };
        let g = Graph::new();
        let a = feature_match_loss(&[g.constant(synth.clone())], &[g.constant(mean(&assoc))]).unwrap().item();
        let shuffled = assoc.select_rows(&[4, 2, 0, 1, 3]);
        let b = feature_match_loss(&[g.constant(synth)], &[g.constant(mean(&shuffled))]).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn inter_has_zero_gradient_beyond_margin() {
    let g = Graph::new();
    let m = g.leaf(Tensor::new([3, 1], vec![0.0, 0.5, 10.0]));
    let l = inter_loss(m, 1.0);
    let grads = g.backward(l);
    let gm = grads.wrt(m).unwrap();
    // class 2 is beyond the margin of both others
    assert_eq!(gm.data()[2], 0.0);
    assert!(gm.data()[0] != 0.0);
}
