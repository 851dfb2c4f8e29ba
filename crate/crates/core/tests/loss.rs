use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vitlora::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
use vitlora::loss::{
    combined_loss, combined_loss_graph, cross_entropy, real_center, scl, scl_parts_of, LabeledBatch, LossConfig,
};
use vitlora::{Error, Graph, Tensor};

fn cfg(lambda: f64, margin: f64) -> LossConfig {
    LossConfig {
        lambda,
        margin,
        ..LossConfig::default()
    }
}

fn batch(features: &[Vec<f64>], preds: &[f64], labels: &[f64]) -> LabeledBatch<f64> {
    let rows: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    LabeledBatch::new(
        Tensor::from_rows(&rows),
        Tensor::new([preds.len()], preds.to_vec()).unwrap(),
        Tensor::new([labels.len()], labels.to_vec()).unwrap(),
    )
    .unwrap()
}

fn hand(fake: [[f64; 2]; 2]) -> LabeledBatch<f64> {
    batch(
        &[vec![0.0, 0.0], vec![2.0, 0.0], fake[0].to_vec(), fake[1].to_vec()],
        &[0.9, 0.8, 0.2, 0.3],
        &[1.0, 1.0, 0.0, 0.0],
    )
}

#[test]
fn cross_entropy_values() {
    let b = batch(&[vec![0.0], vec![0.0]], &[0.9, 0.2], &[1.0, 0.0]);
    let want = -0.5 * (0.9f64.ln() + 0.8f64.ln());
    let got = cross_entropy(&b).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.164252).abs() < 1e-5);

    let half = batch(&vec![vec![0.0]; 3], &[0.5; 3], &[1.0, 0.0, 1.0]);
    assert!((cross_entropy(&half).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);

    let perfect = batch(&vec![vec![0.0]; 2], &[1.0, 0.0], &[1.0, 0.0]);
    assert!(cross_entropy(&perfect).unwrap() < 1e-6);
}

#[test]
fn cross_entropy_rejects_empty_batch() {
    let b = LabeledBatch::new(Tensor::<f64>::zeros([0, 2]), Tensor::zeros([0]), Tensor::zeros([0]));
    let r = b.and_then(|b| cross_entropy(&b));
    assert!(matches!(r, Err(Error::Contract(_))), "{r:?}");
}

#[test]
fn center_cases() {
    let one = batch(&[vec![3.0, -1.0], vec![9.0, 9.0]], &[0.5; 2], &[1.0, 0.0]);
    assert_eq!(real_center(&one).unwrap().data(), &[3.0, -1.0]);
    assert_eq!(real_center(&hand([[5.0, 0.0], [7.0, 0.0]])).unwrap().data(), &[1.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let b = batch(&rows, &[0.5; 8], &labels);
    let got = real_center(&b).unwrap();
    for j in 0..6 {
        let mut sum = 0.0;
        let mut n = 0.0;
        for (row, &l) in rows.iter().zip(&labels) {
            if l == 1.0 {
                sum += row[j];
                n += 1.0;
            }
        }
        assert!((got.data()[j] - sum / n).abs() < 1e-7);
    }

    let fakes = batch(&[vec![1.0], vec![2.0]], &[0.5; 2], &[0.0, 0.0]);
    assert!(matches!(real_center(&fakes), Err(Error::EmptyClass(_))));
}

#[test]
fn scl_hand_values() {
    let far = scl(&hand([[5.0, 0.0], [7.0, 0.0]]), &cfg(1.0, 1.0)).unwrap();
    assert!(!far.skipped);
    assert!((far.value - 1.0).abs() < 1e-6);
    let on_center = scl(&hand([[1.0, 0.0], [1.0, 0.0]]), &cfg(1.0, 1.0)).unwrap();
    assert!((on_center.value - 3.0).abs() < 1e-6);
    let p = scl_parts_of(&hand([[5.0, 0.0], [7.0, 0.0]]), &cfg(1.0, 1.0)).unwrap();
    assert_eq!((p.d_real, p.d_fake), (1.0, 5.0));
}

#[test]
fn scl_is_zero_for_collapsed_reals_and_distant_fakes() {
    let b = batch(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![4.0, 1.0]], &[0.5; 3], &[1.0, 1.0, 0.0]);
    assert_eq!(scl(&b, &cfg(1.0, 3.0)).unwrap().value, 0.0);
}

#[test]
fn single_class_batches_skip_scl() {
    let reals = batch(&[vec![1.0], vec![2.0]], &[0.7, 0.6], &[1.0, 1.0]);
    let s = scl(&reals, &cfg(1.0, 1.0)).unwrap();
    assert!(s.skipped && s.value == 0.0);
    let l = combined_loss(&reals, &cfg(2.0, 1.0)).unwrap();
    assert!(l.scl_skipped);
    assert_eq!(l.total, l.ce);
}

#[test]
fn combined_weights() {
    let b = hand([[5.0, 0.0], [7.0, 0.0]]);
    let ce = cross_entropy(&b).unwrap();
    assert_eq!(combined_loss(&b, &cfg(0.0, 1.0)).unwrap().total, ce);
    let l = combined_loss(&b, &cfg(1.0, 1.0)).unwrap();
    assert!((l.total - (ce + 1.0)).abs() < 1e-12);
}

#[test]
fn negative_weights_are_rejected() {
    assert!(cfg(-0.1, 1.0).validate().is_err());
    assert!(cfg(0.1, -1.0).validate().is_err());
    assert!(cfg(f64::NAN, 1.0).validate().is_err());
}

fn graph_loss(features: &Tensor<f64>, logits: &Tensor<f64>, labels: &Tensor<f64>, c: &LossConfig) -> f64 {
    let g = Graph::new();
    let f = g.constant(features.clone());
    let z = g.constant(logits.clone());
    let l = combined_loss_graph(&g, z, f, labels, c).unwrap();
    let v = g.value(l.total).data()[0];
    v
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let (b, f) = (6, 5);
        let features = Tensor::from_fn([b, f], |_| rng.gen_range(-2.0..2.0));
        let logits = Tensor::from_fn([b, 1], |_| rng.gen_range(-2.0..2.0));
        let labels = Tensor::new([b], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = cfg(0.7, rng.gen_range(0.0..4.0));

        let g = Graph::new();
        let fv = g.param(features.clone());
        let zv = g.param(logits.clone());
        let l = combined_loss_graph(&g, zv, fv, &labels, &c).unwrap();
        let grads = g.backward(l.total).unwrap();

        let num_f = finite_diff_grad(|x| Ok(graph_loss(x, &logits, &labels, &c)), &features, DEFAULT_STEP).unwrap();
        let num_z = finite_diff_grad(|x| Ok(graph_loss(&features, x, &labels, &c)), &logits, DEFAULT_STEP).unwrap();
        let ef = relative_error(grads.get(fv).unwrap(), &num_f, 1e-12);
        let ez = relative_error(grads.get(zv).unwrap(), &num_z, 1e-12);
        assert!(ef < 1e-5 && ez < 1e-5, "trial {trial}: features {ef:e}, logits {ez:e}");
    }
}

#[test]
fn one_scl_step_reduces_real_spread() {
    let b = hand([[1.5, 0.0], [1.0, 0.5]]);
    let c = cfg(1.0, 3.0);
    let before = scl_parts_of(&b, &c).unwrap();
    assert!(before.hinge_arg > 0.0);

    let g = Graph::new();
    let f = g.param(b.features.clone());
    let (node, _) = vitlora::loss::scl_graph(&g, f, &b.labels, &c).unwrap();
    let grads = g.backward(node).unwrap();
    let stepped = b.features.zip_map(grads.get(f).unwrap(), |x, d| x - 0.1 * d);
    let after = scl_parts_of(&LabeledBatch::new(stepped, b.predictions.clone(), b.labels.clone()).unwrap(), &c).unwrap();
    assert!(after.d_real < before.d_real, "{} -> {}", before.d_real, after.d_real);
}

fn arb_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..8, 1usize..5).prop_flat_map(|(n, f)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, f), n),
            prop::collection::vec(prop::bool::ANY, n).prop_map(|v| {
                let mut l: Vec<f64> = v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
                l[0] = 1.0;
                l[1] = 0.0;
                l
            }),
        )
    })
}

proptest! {
    #[test]
    fn scl_is_nonnegative_and_translation_invariant((rows, labels) in arb_batch(), shift in -10.0f64..10.0, margin in 0.0f64..4.0) {
        let preds = vec![0.5; rows.len()];
        let c = cfg(1.0, margin);
        let base = scl(&batch(&rows, &preds, &labels), &c).unwrap().value;
        prop_assert!(base >= 0.0);
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let shifted = scl(&batch(&moved, &preds, &labels), &c).unwrap().value;
        prop_assert!((base - shifted).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn distances_are_homogeneous((rows, labels) in arb_batch(), k in 0.1f64..10.0) {
        let preds = vec![0.5; rows.len()];
        let c = cfg(1.0, 1.0);
        let a = scl_parts_of(&batch(&rows, &preds, &labels), &c).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let b = scl_parts_of(&batch(&scaled, &preds, &labels), &c).unwrap();
        prop_assert!((b.d_real - k * a.d_real).abs() < 1e-9 * (1.0 + b.d_real));
        prop_assert!((b.d_fake - k * a.d_fake).abs() < 1e-9 * (1.0 + b.d_fake));
    }

    #[test]
    fn pushing_fakes_outward_never_increases_scl((rows, labels) in arb_batch(), t in 1.0f64..3.0) {
        let preds = vec![0.5; rows.len()];
        let c = cfg(1.0, 2.0);
        let b = batch(&rows, &preds, &labels);
        let center = real_center(&b).unwrap();
        let moved: Vec<Vec<f64>> = rows
            .iter()
            .zip(&labels)
            .map(|(r, &l)| {
                if l == 1.0 {
                    r.clone()
                } else {
                    r.iter().zip(center.data()).map(|(v, c)| c + t * (v - c)).collect()
                }
            })
            .collect();
        let before = scl(&b, &c).unwrap().value;
        let after = scl(&batch(&moved, &preds, &labels), &c).unwrap().value;
        prop_assert!(after <= before + 1e-9);
    }

    #[test]
    fn losses_are_permutation_invariant((rows, labels) in arb_batch(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<f64> = rows.iter().map(|_| rng.gen_range(0.01..0.99)).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let perm = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let prows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let c = cfg(0.5, 1.0);
        let a = combined_loss(&batch(&rows, &preds, &labels), &c).unwrap();
        let b = combined_loss(&batch(&prows, &perm(&preds), &perm(&labels)), &c).unwrap();
        prop_assert!((a.ce - b.ce).abs() < 1e-12);
        prop_assert!((a.scl - b.scl).abs() < 1e-9);
    }
}
