use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vitlora::lora::{
    adapted_projection, inject, low_rank_delta, merge, merge_into, project_qkv, projection_param_counts,
    trainable_parameter_count, AdapterSet, LoraAdapter, LoraConfig, ProjectionTarget,
};
use vitlora::model::{bind_params, forward, init_model, is_head_param, ModelState, ViTConfig};
use vitlora::{Graph, Tensor};

use ProjectionTarget::{Key, Query};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-std..std))
}

fn images<T: vitlora::Scalar>(rng: &mut ChaCha8Rng, cfg: &ViTConfig, batch: usize) -> Tensor<T> {
    Tensor::from_fn([batch, cfg.channels, cfg.image_size, cfg.image_size], |_| {
        T::from_f64_lossy(rng.gen_range(0.0..1.0))
    })
}

/// Plain triple loop, independent of the crate's kernels.
fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a.data()[i * k + t] * b.data()[t * m + j];
            }
        }
    }
    Tensor::new([n, m], out).unwrap()
}

fn sup_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b) / b.max_abs()
}

fn adapter(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, r: usize, s: f64) -> LoraAdapter<f64> {
    LoraAdapter::new(rand_tensor(rng, [d_in, r], 0.5), rand_tensor(rng, [r, d_out], 0.5), s, Query, 0).unwrap()
}

#[test]
fn inject_adds_one_adapter_per_block_and_target() {
    let mut model = init_model::<f32>(&ViTConfig::default()).unwrap();
    let set = inject(&mut model, &LoraConfig::default()).unwrap();
    assert_eq!(set.len(), 4);
    for block in 0..2 {
        for t in [Query, Key] {
            let a = set.get(block, t).unwrap();
            assert!(a.w_up.data().iter().all(|&v| v == 0.0));
            assert!(a.w_down.data().iter().any(|&v| v != 0.0));
        }
    }
    let names: BTreeSet<String> = set.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains("lora.0.query.w_down") && names.contains("lora.1.key.w_up"), "{names:?}");
}

#[test]
fn trainable_set_is_adapters_plus_head() {
    let cfg = ViTConfig::default();
    let mut model = init_model::<f32>(&cfg).unwrap();
    inject(&mut model, &LoraConfig::default()).unwrap();
    let trainable: BTreeSet<&str> = model.params().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
    let expected: BTreeSet<&str> = ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"].into();
    assert_eq!(trainable, expected);
    let all: BTreeSet<String> = cfg.parameter_shapes().into_iter().map(|(n, _)| n).collect();
    let frozen: BTreeSet<&str> = model.params().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect();
    let rest: BTreeSet<&str> = all.iter().map(String::as_str).filter(|n| !expected.contains(n)).collect();
    assert_eq!(frozen, rest);
    assert!(frozen.iter().all(|n| !is_head_param(n)));
}

#[test]
fn empty_or_value_targets_are_rejected() {
    let mut model = init_model::<f32>(&ViTConfig::default()).unwrap();
    let empty = LoraConfig {
        targets: vec![],
        ..LoraConfig::default()
    };
    assert!(matches!(inject(&mut model, &empty), Err(vitlora::Error::Config(_))));
    let value = LoraConfig {
        targets: vec![ProjectionTarget::Value],
        ..LoraConfig::default()
    };
    assert!(inject(&mut model, &value).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w_down = rand_tensor(&mut rng, [8, 2], 1.0);
    let w_up = rand_tensor(&mut rng, [2, 8], 1.0);
    assert!(LoraAdapter::new(w_down.clone(), w_up.clone(), 1.0, ProjectionTarget::Value, 0).is_err());
    assert!(LoraAdapter::new(rand_tensor(&mut rng, [8, 8], 1.0), rand_tensor(&mut rng, [8, 8], 1.0), 1.0, Key, 0).is_err());
}

#[test]
fn injected_model_is_a_no_op_at_init() {
    let cfg = ViTConfig::default();
    let base = init_model::<f32>(&cfg).unwrap();
    let mut adapted = base.clone();
    let set = inject(&mut adapted, &LoraConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = images::<f32>(&mut rng, &cfg, 2);
        let a = forward(&base, &x, None).unwrap();
        let b = forward(&adapted, &x, Some(&set)).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        assert!(a.features.bit_eq(&b.features));
    }
}

#[test]
fn adapted_projection_zero_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, [5, 8], 1.0);
    let w = rand_tensor(&mut rng, [8, 8], 1.0);
    let base = naive_matmul(&x, &w);

    let mut a = adapter(&mut rng, 8, 8, 2, 1.0);
    a.w_up = Tensor::zeros([2, 8]);
    assert!(adapted_projection(&x, &w, &a).unwrap().max_abs_diff(&base) < 1e-12);

    let mut b = adapter(&mut rng, 8, 8, 2, 0.0);
    b.scale = 0.0;
    assert!(adapted_projection(&x, &w, &b).unwrap().max_abs_diff(&base) < 1e-12);
}

#[test]
fn adapted_projection_matches_dense_merge() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, [6, 8], 1.0);
        let w = rand_tensor(&mut rng, [8, 8], 1.0);
        let s = rng.gen_range(0.1..2.0);
        let a = adapter(&mut rng, 8, 8, 2, s);
        let dense = naive_matmul(&a.w_down, &a.w_up).map(|v| v * s);
        let oracle = naive_matmul(&x, &w.zip_map(&dense, |p, q| p + q));
        assert!(sup_rel(&adapted_projection(&x, &w, &a).unwrap(), &oracle) < 1e-5);
    }
}

#[test]
fn adapted_projection_rejects_shape_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = adapter(&mut rng, 8, 6, 2, 1.0);
    let x = rand_tensor(&mut rng, [2, 8], 1.0);
    let w = rand_tensor(&mut rng, [8, 8], 1.0);
    assert!(adapted_projection(&x, &w, &a).is_err());
    assert!(merge(&w, &a).is_err());
}

#[test]
fn merging_a_zero_adapter_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = rand_tensor(&mut rng, [8, 8], 1.0);
    let mut a = adapter(&mut rng, 8, 8, 3, 1.0);
    a.w_up = Tensor::zeros([3, 8]);
    assert!(merge(&w, &a).unwrap().bit_eq(&w));
}

/// Numerical rank by Gaussian elimination with full pivoting.
fn numerical_rank(m: &Tensor<f64>, tol: f64) -> usize {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut a: Vec<Vec<f64>> = (0..rows).map(|i| m.data()[i * cols..(i + 1) * cols].to_vec()).collect();
    let scale = m.max_abs().max(1e-300);
    let mut rank = 0;
    for _ in 0..rows.min(cols) {
        let mut best = (0.0, 0, 0);
        for (i, row) in a.iter().enumerate().skip(rank) {
            for (j, &v) in row.iter().enumerate() {
                if v.abs() > best.0 {
                    best = (v.abs(), i, j);
                }
            }
        }
        if best.0 / scale < tol {
            break;
        }
        a.swap(rank, best.1);
        for row in a.iter_mut() {
            row.swap(rank, best.2);
        }
        let pivot = a[rank].clone();
        for row in a.iter_mut().skip(rank + 1) {
            let f = row[rank] / pivot[rank];
            for (v, p) in row.iter_mut().zip(&pivot) {
                *v -= f * p;
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn merged_update_has_rank_at_most_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in 1..=5 {
        let w = rand_tensor(&mut rng, [10, 12], 1.0);
        let a = adapter(&mut rng, 10, 12, r, 0.7);
        let delta = merge(&w, &a).unwrap().zip_map(&w, |m, b| m - b);
        assert_eq!(numerical_rank(&delta, 1e-4), r);
    }
}

#[test]
fn merge_then_zero_adapter_reproduces_merged_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, [4, 8], 1.0);
    let w = rand_tensor(&mut rng, [8, 8], 1.0);
    let a = adapter(&mut rng, 8, 8, 2, 1.0);
    let merged = merge(&w, &a).unwrap();
    let mut zero = adapter(&mut rng, 8, 8, 2, 1.0);
    zero.w_up = Tensor::zeros([2, 8]);
    let via_adapter = adapted_projection(&x, &merged, &zero).unwrap();
    assert!(via_adapter.max_abs_diff(&naive_matmul(&x, &merged)) < 1e-12);
}

fn randomized_set(model: &mut ModelState<f64>, rank: usize, seed: u64) -> AdapterSet<f64> {
    let cfg = LoraConfig {
        rank,
        seed,
        ..LoraConfig::default()
    };
    let mut set = inject(model, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for a in set.iter_mut() {
        for v in a.w_up.data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for v in a.w_down.data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    set
}

/// In 64-bit: initial logits are O(1e-2), so f32 rounding alone can reach
/// about 1e-5 of the output scale.
#[test]
fn merged_model_matches_adapter_forward() {
    let cfg = ViTConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for r in [1, 2, 4, 8] {
        let mut model = init_model::<f64>(&cfg).unwrap();
        let set = randomized_set(&mut model, r, r as u64);
        let merged = merge_into(&model, &set).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let x = images::<f64>(&mut rng, &cfg, 1);
            let a = forward(&model, &x, Some(&set)).unwrap().logits;
            let m = forward(&merged, &x, None).unwrap().logits;
            worst = worst.max(sup_rel(&a, &m));
        }
        assert!(worst < 1e-5, "r={r}: {worst:e}");
    }
}

#[test]
fn value_projection_is_untouched_by_adapters() {
    let cfg = ViTConfig::default();
    let mut model = init_model::<f64>(&cfg).unwrap();
    let mut set = inject(&mut model, &LoraConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for a in set.iter_mut() {
        a.w_up = rand_tensor(&mut rng, [a.rank, a.d_out()], 0.3);
    }
    let h = rand_tensor(&mut rng, [cfg.n_tokens() * 2, cfg.embed_dim], 1.0);
    let g = Graph::new();
    let params = bind_params(&g, &model, false);
    let bound = set.bind(&g, false);
    let (q0, _, v0) = project_qkv(&g, g.constant(h.clone()), 0, &params, None).unwrap();
    let (q1, _, v1) = project_qkv(&g, g.constant(h), 0, &params, Some(&bound)).unwrap();
    assert!(g.value(v0).bit_eq(&g.value(v1)));
    assert!(!g.value(q0).bit_eq(&g.value(q1)));
}

#[test]
fn desk_trainable_total_is_the_enumerated_sum() {
    let cfg = ViTConfig::default();
    let mut model = init_model::<f32>(&cfg).unwrap();
    let set = inject(&mut model, &LoraConfig::default()).unwrap();
    let report = trainable_parameter_count(&model, &set);
    let (d, f, r) = (cfg.embed_dim, cfg.head_hidden, 4);
    let adapters = cfg.depth * 2 * r * (d + d);
    let head = (d * f + f) + (f + 1);
    assert_eq!(report.trainable, adapters + head);
    assert_eq!(report.trainable, 4161);
    let total: usize = cfg.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(report.frozen, total - head);
    assert_eq!((report.per_projection_adapter, report.per_projection_dense), (512, 4096));
}

#[test]
fn per_projection_counts_for_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (d_in, d_out) = (rng.gen_range(2..200), rng.gen_range(2..200));
        let r = rng.gen_range(1..d_in.min(d_out));
        let a = LoraAdapter::new(
            Tensor::<f32>::zeros([d_in, r]),
            Tensor::zeros([r, d_out]),
            1.0,
            Key,
            0,
        )
        .unwrap();
        assert_eq!(a.param_count(), r * (d_in + d_out));
        assert_eq!(projection_param_counts(d_in, d_out, r), (r * (d_in + d_out), d_in * d_out));
    }
    // No clamping when the adapter is as large as the projection.
    assert_eq!(projection_param_counts(64, 64, 64), (8192, 4096));
}

proptest! {
    #[test]
    fn correction_is_linear_in_scale(seed in any::<u64>(), s in 0.01f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, [3, 8], 1.0);
        let a = adapter(&mut rng, 8, 8, 2, s);
        let mut doubled = a.clone();
        doubled.scale = 2.0 * s;
        let one = low_rank_delta(&x, &a).unwrap();
        let two = low_rank_delta(&x, &doubled).unwrap();
        prop_assert!(two.bit_eq(&one.map(|v| 2.0 * v)));
    }

    #[test]
    fn merge_preserves_shape_and_adds_scaled_product(seed in any::<u64>(), r in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, [7, 9], 1.0);
        let a = adapter(&mut rng, 7, 9, r, 1.5);
        let m = merge(&w, &a).unwrap();
        prop_assert_eq!(m.shape(), w.shape());
        let oracle = w.zip_map(&naive_matmul(&a.w_down, &a.w_up), |p, q| p + 1.5 * q);
        prop_assert!(m.max_abs_diff(&oracle) < 1e-12);
    }
}
