// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{trained, LAYER};
use proptest::prelude::*;
use visual_circuits::circuits::{
    build_set, compute_selectivity, permuted_control, random_control, spatial_map, union, FeatureSet, SelectionRule, SetKind, DEFAULT_EPS,
};
use visual_circuits::svr::TaskType;

/// Two-pass reference: means first, then population variances.
fn naive_sigma(codes: &[Vec<f64>], pos: &[bool], eps: f64) -> Vec<[f64; 5]> {
    let m = codes[0].len();
    (0..m)
        .map(|j| {
            let pick = |want: bool| codes.iter().zip(pos).filter(|(_, &p)| p == want).map(|(c, _)| c[j]).collect::<Vec<f64>>();
            let (a, b) = (pick(true), pick(false));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
            let (ma, mb) = (mean(&a), mean(&b));
            let (va, vb) = (var(&a, ma), var(&b, mb));
            [ma, mb, va, vb, (ma - mb) / (0.5 * (va + vb) + eps).sqrt()]
        })
        .collect()
}

fn draw() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (2usize..30, 1usize..6).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..5.0], m), n),
            prop::collection::vec(any::<bool>(), n).prop_filter("both pools", |p| p.iter().any(|&x| x) && p.iter().any(|&x| !x)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_two_pass_oracle((codes, pos) in draw()) {
        let t = compute_selectivity(&codes, &pos, DEFAULT_EPS).unwrap();
        for (f, o) in t.features.iter().zip(naive_sigma(&codes, &pos, DEFAULT_EPS)) {
            let got = [f.mu_pos, f.mu_neg, f.var_pos, f.var_neg, f.sigma];
            for (g, w) in got.iter().zip(o) {
                prop_assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "{:?} vs {:?}", got, o);
            }
        }
    }
}

proptest! {
    #[test]
    fn antisymmetric_under_pool_swap((codes, pos) in draw()) {
        let a = compute_selectivity(&codes, &pos, DEFAULT_EPS).unwrap().sigmas();
        let flipped: Vec<bool> = pos.iter().map(|p| !p).collect();
        let b = compute_selectivity(&codes, &flipped, DEFAULT_EPS).unwrap().sigmas();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x + y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn shift_invariant((codes, pos) in draw(), c in -10.0f64..10.0) {
        let a = compute_selectivity(&codes, &pos, DEFAULT_EPS).unwrap().sigmas();
        let shifted: Vec<Vec<f64>> = codes.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
        let b = compute_selectivity(&shifted, &pos, DEFAULT_EPS).unwrap().sigmas();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn set_algebra(a in prop::collection::btree_set(0usize..64, 0..10), b in prop::collection::btree_set(0usize..64, 0..10)) {
        let fa = FeatureSet::new(SetKind::Pattern, a.iter().copied(), "a", None);
        let fb = FeatureSet::new(SetKind::Global, b.iter().copied(), "b", None);
        let u = union(&fa, &fb);
        prop_assert!(u.len() <= fa.len() + fb.len());
        prop_assert!(u.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().chain(&b).all(|j| u.contains(*j)));
    }
}

#[test]
fn equal_means_give_zero() {
    let codes = vec![vec![1.0], vec![3.0], vec![3.0], vec![1.0]];
    let t = compute_selectivity(&codes, &[true, true, false, false], DEFAULT_EPS).unwrap();
    assert_eq!(t.features[0].sigma, 0.0);
}

#[test]
fn controls_are_seeded() {
    assert_eq!(random_control(7, 512, 3).unwrap(), random_control(7, 512, 3).unwrap());
    assert_ne!(random_control(7, 512, 3).unwrap().indices, random_control(7, 512, 4).unwrap().indices);
    let u = FeatureSet::new(SetKind::Union, [3, 9, 40], "u", None);
    let pool: Vec<usize> = (0..100).collect();
    let p = permuted_control(&u, &pool, 5).unwrap();
    assert_eq!(p.len(), 3);
    assert_eq!(p, permuted_control(&u, &pool, 5).unwrap());
    assert!(random_control(600, 512, 0).is_err());
}

#[test]
fn surrogate_pattern_set_is_small_and_grounded() {
    let fx = trained();
    let m = fx.sae.m;
    assert!(!fx.pattern.is_empty());
    assert!(fx.pattern.len() as f64 <= 0.005 * m as f64, "{} of {m}", fx.pattern.len());
    assert_eq!(fx.pattern.rule, SelectionRule::default().to_string());

    let feature = fx.pattern.indices[0];
    let (ex, rec) = fx
        .train
        .iter()
        .zip(&fx.train_recs)
        .find(|(e, _)| e.task_type == TaskType::Pattern)
        .unwrap();
    let map = spatial_map(rec, &fx.sae, feature, LAYER).unwrap();
    assert_eq!(map.values.len(), 16);
    assert!(map.values.iter().all(|&v| v >= 0.0));
    for (t, v) in map.values.iter().enumerate() {
        let h: Vec<f64> = rec.token(LAYER, t).iter().map(|&x| f64::from(x)).collect();
        assert_eq!(*v, fx.sae.encode(&h).unwrap()[feature]);
    }
    assert_eq!(map.get(1, 2), map.values[6]);
    let image_mean = map.values.iter().sum::<f64>() / 16.0;
    let text: Vec<f64> = rec
        .mask
        .text_tokens()
        .map(|t| {
            let h: Vec<f64> = rec.token(LAYER, t).iter().map(|&x| f64::from(x)).collect();
            fx.sae.encode(&h).unwrap()[feature]
        })
        .collect();
    let text_mean = text.iter().sum::<f64>() / text.len() as f64;
    assert!(image_mean > text_mean, "{}: image {image_mean} vs text {text_mean}", ex.id);

    // A feature that never fires on this record gives an all-zero map.
    let quiet = (0..m)
        .find(|&j| {
            rec.mask.image_tokens().all(|t| {
                let h: Vec<f64> = rec.token(LAYER, t).iter().map(|&x| f64::from(x)).collect();
                fx.sae.encode(&h).unwrap()[j] == 0.0
            })
        })
        .unwrap();
    assert!(spatial_map(rec, &fx.sae, quiet, LAYER).unwrap().values.iter().all(|&v| v == 0.0));
    assert!(spatial_map(rec, &fx.sae, m, LAYER).is_err());
}

#[test]
fn threshold_rule_errors_when_nothing_passes() {
    let fx = trained();
    let pos: Vec<bool> = fx.train.iter().map(|e| e.task_type == TaskType::Pattern).collect();
    let t = compute_selectivity(&fx.codes, &pos, DEFAULT_EPS).unwrap();
    let err = build_set(&t, SetKind::Pattern, SelectionRule::Threshold { tau: f64::INFINITY }).unwrap_err();
    assert!(err.to_string().contains("top"), "{err}");
    assert_eq!(build_set(&t, SetKind::Pattern, SelectionRule::TopN { n: 5 }).unwrap().len(), 5);
}
