use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pvnet_core::losses::{generalized_dice_loss, kl_divergence, total_loss, LossWeights};
use pvnet_core::metrics::dice_score;
use pvnet_core::model::Gaussian;
use pvnet_core::{Graph, Tensor};

fn kl(q: (&[f64], &[f64]), p: (&[f64], &[f64])) -> f64 {
    let n = q.0.len();
    let mut g = Graph::<f64>::new();
    let mut c = |v: &[f64]| g.constant(Tensor::from_vec(&[1, n], v.to_vec()).unwrap());
    let (qm, ql, pm, pl) = (c(q.0), c(q.1), c(p.0), c(p.1));
    let out = kl_divergence(
        &mut g,
        &Gaussian {
            mean: qm,
            logvar: ql,
        },
        &Gaussian {
            mean: pm,
            logvar: pl,
        },
    )
    .unwrap();
    g.value(out).item().unwrap()
}

#[test]
fn kl_agrees_with_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let n = rng.random_range(1..4);
        let mut v =
            |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let (qm, ql, pm, pl) = (v(-1.0, 1.0), v(-1.0, 1.0), v(-1.0, 1.0), v(-1.0, 1.0));
        let exact = kl((&qm, &ql), (&pm, &pl));
        let samples = 200_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            for d in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = qm[d] + (0.5 * ql[d]).exp() * e;
                let lq = -0.5 * (ql[d] + (z - qm[d]).powi(2) / ql[d].exp());
                let lp = -0.5 * (pl[d] + (z - pm[d]).powi(2) / pl[d].exp());
                acc += lq - lp;
            }
        }
        let mc = acc / samples as f64;
        assert!(
            (exact - mc).abs() <= 0.05 * mc.abs() + 2e-3,
            "{exact} vs {mc}"
        );
    }
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_on_the_diagonal(
        a in prop::collection::vec(-6.0f64..6.0, 1..9),
        b in prop::collection::vec(-6.0f64..6.0, 1..9),
    ) {
        let n = a.len().min(b.len());
        let (qm, ql, pm, pl) = (&a[..n], &b[..n], &b[..n], &a[..n]);
        prop_assert!(kl((qm, ql), (pm, pl)) >= -1e-12);
        prop_assert!(kl((qm, ql), (qm, ql)).abs() <= 1e-12);
    }

    #[test]
    fn dice_is_symmetric(
        a in prop::collection::vec(0u8..3, 1..200),
        b in prop::collection::vec(0u8..3, 200),
        class in 0u8..3,
    ) {
        let b = &b[..a.len()];
        let ab = dice_score(&a, b, class).unwrap();
        prop_assert_eq!(ab, dice_score(b, &a, class).unwrap());
        prop_assert!((0.0..=100.0).contains(&ab));
    }
}

/// GDL of `t·onehot + (1 − t)·uniform` on a fixed two-class volume.
fn gdl_at(t: f64) -> f64 {
    let v = 10;
    let labels: Vec<usize> = (0..v).map(|i| usize::from(i % 3 == 0)).collect();
    let mut hot = vec![0.0; 2 * v];
    for (i, &c) in labels.iter().enumerate() {
        hot[c * v + i] = 1.0;
    }
    let probs: Vec<f64> = hot.iter().map(|&h| t * h + (1.0 - t) * 0.5).collect();
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::from_vec(&[1, 2, v, 1, 1], probs).unwrap());
    let y = g.constant(Tensor::from_vec(&[1, 2, v, 1, 1], hot).unwrap());
    let loss = generalized_dice_loss(&mut g, p, y, 1e-6).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn gdl_falls_monotonically_toward_the_truth() {
    let values: Vec<f64> = (0..=10).map(|k| gdl_at(k as f64 / 10.0)).collect();
    for w in values.windows(2) {
        assert!(w[1] < w[0], "{values:?}");
    }
    // The smoothing term leaves a perfect prediction a hair below zero.
    assert!(values[10].abs() < 1e-5);
    assert!(values.iter().all(|v| (-1e-5..=1.0).contains(v)));
}

#[test]
fn empty_class_does_not_blow_up() {
    // Class 1 absent from both prediction and truth.
    let mut g = Graph::<f64>::new();
    let mut hot = vec![0.0; 8];
    hot[..4].fill(1.0);
    let p = g.param(Tensor::from_vec(&[1, 2, 4, 1, 1], hot.clone()).unwrap());
    let y = g.constant(Tensor::from_vec(&[1, 2, 4, 1, 1], hot).unwrap());
    let loss = generalized_dice_loss(&mut g, p, y, 1e-6).unwrap();
    let value = g.value(loss).item().unwrap();
    assert!(value.is_finite() && value.abs() < 1e-5, "{value}");
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(p).unwrap().all_finite());
}

#[test]
fn total_loss_gradient_is_the_weighted_sum() {
    let w = LossWeights {
        lambda1: 1.5,
        lambda2: 10.0,
        epsilon: 1e-6,
    };
    let mut g = Graph::<f64>::new();
    let seg = g.param(Tensor::scalar(0.3));
    let klv = g.param(Tensor::scalar(0.02));
    let total = total_loss(&mut g, seg, klv, &w).unwrap();
    assert!((g.value(total).item().unwrap() - w.combine(0.3, 0.02)).abs() < 1e-15);
    let grads = g.backward(total).unwrap();
    assert_eq!(grads.get(seg).unwrap().item().unwrap(), 1.5);
    assert_eq!(grads.get(klv).unwrap().item().unwrap(), 10.0);
}
