use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vitlora::metrics::{accuracy, auc, EvalReport};
use vitlora::Error;

/// Pairwise Mann-Whitney count in exact integer arithmetic (halves doubled).
fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins2: u64 = 0;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins2 += 2;
            } else if scores[i] == scores[j] {
                wins2 += 1;
            }
        }
    }
    wins2 as f64 / (2 * p * n) as f64
}

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=500);
    // Few distinct values so ties are common.
    let levels = rng.gen_range(2..40);
    let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / 7.0 - 2.0).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    // Plus some continuous values.
    for s in scores.iter_mut().step_by(5) {
        *s = rng.gen_range(-3.0..3.0);
    }
    (scores, labels)
}

#[test]
fn rank_auc_equals_pairwise_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let (scores, labels) = random_set(&mut rng);
        let fast = auc(&scores, &labels).unwrap();
        let slow = brute_force_auc(&scores, &labels);
        assert_eq!(fast, slow, "trial {trial}, n = {}", scores.len());
    }
}

#[test]
fn auc_boundary_cases() {
    assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(), 0.0);
    assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
}

#[test]
fn auc_errors() {
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
    assert!(matches!(auc(&[0.1, 0.2], &[false, false]), Err(Error::Metric(_))));
    assert!(matches!(auc(&[0.1], &[true, false]), Err(Error::Metric(_))));
    assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn accuracy_is_direct_count_at_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(1..300);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let (mut tp, mut tn) = (0, 0);
        for (&s, &l) in scores.iter().zip(&labels) {
            let p = sigmoid(s);
            if l && p >= 0.5 {
                tp += 1;
            }
            if !l && p < 0.5 {
                tn += 1;
            }
        }
        assert_eq!(accuracy(&scores, &labels).unwrap(), (tp + tn) as f64 / n as f64);
    }
    // A logit of exactly zero sits on the threshold and counts as positive.
    assert_eq!(accuracy(&[0.0, 0.0], &[true, false]).unwrap(), 0.5);
}

#[test]
fn report_counts_and_display() {
    let r = EvalReport::from_scores("a->b", &[2.0, -1.0, 0.5], &[true, false, false]).unwrap();
    assert_eq!((r.n_pos, r.n_neg), (1, 2));
    assert_eq!(r.auc, 1.0);
    assert!((r.acc - 2.0 / 3.0).abs() < 1e-15);
    assert!(r.to_string().starts_with("a->b,1,"));
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_set(&mut rng);
        let mapped: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn flipping_labels_complements_auc(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_set(&mut rng);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}
