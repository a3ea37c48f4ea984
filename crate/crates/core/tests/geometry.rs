// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visual_circuits::activation::{SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::circuits::{FeatureSet, SetKind};
use visual_circuits::geometry::{
    attention_entropy_probe, coactivation, cosine_interference, curvature_drift_error, layernorm_amplification_sim,
    mean_effective_direction, osp_compose, pairwise_alignment, snr_analysis, EntropyConfig, LnSimConfig, COLLAPSE_NSR,
};
use visual_circuits::linalg::{dot, norm, random_orthonormal, Matrix};
use visual_circuits::sae::SaeParams;
use visual_circuits::svr::{generate_records, GeneratorConfig, SplitName, Vocabulary};

/// Dictionary whose rows are the given directions.
fn sae_with(rows: Vec<Vec<f64>>) -> SaeParams {
    let d = rows[0].len();
    let dict = Matrix::from_rows(&rows);
    SaeParams {
        d,
        m: rows.len(),
        k: 1,
        w_enc: dict.clone(),
        b_enc: vec![0.0; rows.len()],
        dict,
        b_dec: vec![0.0; d],
        pre_bias: false,
    }
}

fn set(indices: &[usize]) -> FeatureSet {
    FeatureSet::new(SetKind::Pattern, indices.iter().copied(), "test", None)
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

#[test]
fn mean_direction_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = random_orthonormal(4, 6, &mut rng);
    let sae = sae_with(q.iter_rows().map(<[f64]>::to_vec).collect());
    let constant = vec![vec![1.0, 0.0, 0.0, 0.0]; 5];
    let dj = mean_effective_direction(&constant, &sae, &set(&[0])).unwrap();
    assert!(dj.delta.iter().zip(sae.feature(0)).all(|(a, b)| (a - b).abs() < 1e-15));

    let codes: Vec<Vec<f64>> = (0..20).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 5) as f64 * 0.3).collect()).collect();
    let a = mean_effective_direction(&codes, &sae, &set(&[0, 2])).unwrap();
    let b = mean_effective_direction(&codes, &sae, &set(&[1, 3])).unwrap();
    let ab = mean_effective_direction(&codes, &sae, &set(&[0, 1, 2, 3])).unwrap();
    for i in 0..6 {
        assert!((ab.delta[i] - a.delta[i] - b.delta[i]).abs() < 1e-12);
    }
    assert!((a.norm - norm(&a.delta)).abs() < 1e-15);

    let zeros = vec![vec![0.0; 4]; 3];
    assert_eq!(mean_effective_direction(&zeros, &sae, &set(&[1])).unwrap().norm, 0.0);
    assert!(mean_effective_direction(&[], &sae, &set(&[1])).is_err());
}

#[test]
fn cosine_cases() {
    let a = [1.0, 0.0];
    assert!((cosine_interference(&a, &a).unwrap().rho - 1.0).abs() < 1e-15);
    let o = cosine_interference(&a, &[0.0, 1.0]).unwrap();
    assert_eq!(o.rho, 0.0);
    assert!((o.union_norm - 2f64.sqrt()).abs() < 1e-15);

    let b = [-0.33, (1.0f64 - 0.33 * 0.33).sqrt()];
    let r = cosine_interference(&a, &b).unwrap();
    assert!((r.rho + 0.33).abs() < 1e-12);
    assert!((r.union_norm - 1.34f64.sqrt()).abs() < 1e-9);
    assert!(r.union_norm < 2.0);
    assert!(cosine_interference(&a, &[0.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn union_norm_identity(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8), s in 0.1f64..10.0) {
        prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
        let r = cosine_interference(&a, &b).unwrap();
        let (na, nb) = (norm(&a), norm(&b));
        let lhs = r.union_norm * r.union_norm;
        let rhs = na * na + nb * nb + 2.0 * r.rho * na * nb;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0));
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((cosine_interference(&scaled, &b).unwrap().rho - r.rho).abs() < 1e-12);
    }

    #[test]
    fn osp_keeps_clean_component(p in prop::collection::vec(-3.0f64..3.0, 6), g in prop::collection::vec(-3.0f64..3.0, 6)) {
        prop_assume!(norm(&p) > 1e-2);
        let out = osp_compose(&p, &g).unwrap();
        let resid: Vec<f64> = out.iter().zip(&p).map(|(o, q)| o - q).collect();
        prop_assert!(dot(&resid, &p).abs() <= 1e-10 * (1.0 + norm(&g) * norm(&p)));
        prop_assert!((dot(&out, &p) / norm(&p) - norm(&p)).abs() < 1e-9);
    }
}

#[test]
fn alignment_cases() {
    let same = pairwise_alignment(&sae_with(vec![unit(3, 0)]), &set(&[0]), &set(&[0]), 10).unwrap();
    assert_eq!(same.fraction_negative, 0.0);
    assert_eq!(same.histogram[9], 1);

    // ±e basis: {e0, e1} against {−e0, e2, −e1}. Negative pairs: (e0,−e0), (e1,−e1).
    let sae = sae_with(vec![unit(3, 0), unit(3, 1), unit(3, 0).iter().map(|v| -v).collect(), unit(3, 2), unit(3, 1).iter().map(|v| -v).collect()]);
    let (a, b) = (set(&[0, 1]), set(&[2, 3, 4]));
    let r = pairwise_alignment(&sae, &a, &b, 4).unwrap();
    assert_eq!(r.pairs, 6);
    assert!((r.fraction_negative - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(pairwise_alignment(&sae, &b, &a, 4).unwrap().fraction_negative, r.fraction_negative);
}

#[test]
fn snr_cases() {
    let r = snr_analysis(&[1.0, 0.0], &[0.0, 1.0], COLLAPSE_NSR).unwrap();
    assert_eq!((r.snr, r.nsr), (1.0, 1.0));
    let r = snr_analysis(&[0.1, 0.0], &[0.0, 1.0], COLLAPSE_NSR).unwrap();
    assert!((r.snr - 0.01).abs() < 1e-15 && (r.nsr - 10.0).abs() < 1e-12);
    assert!(r.collapse);
    let half = snr_analysis(&[0.05, 0.0], &[0.0, 1.0], COLLAPSE_NSR).unwrap();
    assert!((half.nsr - 2.0 * r.nsr).abs() < 1e-12);
    let zero = snr_analysis(&[0.0, 0.0], &[0.0, 1.0], COLLAPSE_NSR).unwrap();
    assert!(zero.nsr.is_infinite() && zero.collapse);
    assert!(snr_analysis(&[1.0, 0.0], &[0.0, 0.0], COLLAPSE_NSR).is_err());
}

fn sweep() -> Vec<f64> {
    (0..9).map(|i| 10f64.powf(-3.0 + i as f64 * 0.25)).collect()
}

#[test]
fn layernorm_law() {
    let dir = random_orthonormal(1, 64, &mut ChaCha8Rng::seed_from_u64(9)).row(0).to_vec();
    for seed in 0..5 {
        let cfg = LnSimConfig { seed, ..LnSimConfig::default() };
        let curve = layernorm_amplification_sim(&dir, &sweep(), &cfg).unwrap();
        assert!((curve.slope + 1.0).abs() <= 0.1, "seed {seed}: slope {}", curve.slope);

        let doubled = layernorm_amplification_sim(&dir, &sweep(), &LnSimConfig { gamma: 2.0, ..cfg.clone() }).unwrap();
        for (a, b) in curve.points.iter().zip(&doubled.points) {
            assert!((a.1 - b.1).abs() <= 1e-12 * a.1);
        }
    }
    let clean = layernorm_amplification_sim(&dir, &sweep(), &LnSimConfig { noise_norm: 0.0, ..LnSimConfig::default() }).unwrap();
    assert!(clean.points.iter().all(|p| p.1 < 1e-12), "{:?}", clean.points);
    assert!(layernorm_amplification_sim(&vec![1.0; 64], &sweep(), &LnSimConfig::default()).is_err());
    assert!(layernorm_amplification_sim(&dir, &[0.0], &LnSimConfig::default()).is_err());
}

#[test]
fn attention_entropy_cases() {
    let d = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Matrix::gaussian(16, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let dir = unit(d, 0);
    let cfg = EntropyConfig::default();
    let flat = attention_entropy_probe(&w, &w, &dir, &[0.0], &cfg).unwrap();
    let max = 16f64.ln();
    assert!((flat[0].1 - max).abs() <= 0.05 * max, "entropy {} vs {max}", flat[0].1);

    let single = EntropyConfig { patches: 1, ..cfg.clone() };
    assert!(attention_entropy_probe(&w, &w, &dir, &[0.0, 5.0], &single).unwrap().iter().all(|p| p.1 == 0.0));

    // Two patches, identity maps: any large score gap, either sign, peaks the softmax.
    let eye = Matrix::from_rows(&(0..d).map(|i| unit(d, i)).collect::<Vec<_>>());
    let pair = EntropyConfig { patches: 2, ..cfg };
    let curve = attention_entropy_probe(&eye, &eye, &dir, &[1000.0, 100.0, 10.0, 1.0, 0.0], &pair).unwrap();
    assert!(curve[0].1 < 0.5 * 2f64.ln(), "strong signal entropy {}", curve[0].1);
    for w in curve.windows(2) {
        assert!(w[1].1 >= w[0].1 - 0.02, "entropy fell from {} to {} as the signal shrank", w[0].1, w[1].1);
    }
}

#[test]
fn curvature_cases() {
    let alphas = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    let affine = |h: &[f64]| h.iter().enumerate().map(|(i, v)| 2.0 * v + i as f64).collect::<Vec<_>>();
    let r = curvature_drift_error(affine, &[0.3, -0.2, 1.0], &unit(3, 1), &alphas).unwrap();
    assert!(r.points.iter().all(|p| p.e_drift <= 1e-8 && p.measured <= 1e-8));

    let quad = |h: &[f64]| h.iter().map(|v| v + v * v).collect::<Vec<_>>();
    let r = curvature_drift_error(quad, &[0.5, 0.1, -0.4], &unit(3, 0), &[0.1]).unwrap();
    assert!((r.points[0].gamma[0] - 2.0).abs() < 1e-8);
    assert!((r.points[0].e_drift - 0.01).abs() < 1e-8);

    let warn = curvature_drift_error(quad, &[0.5, 0.1, -0.4], &unit(3, 0), &[1e-6]).unwrap();
    assert_eq!(warn.warnings.len(), 1);

    let model = SurrogateModel::new(SurrogateConfig::default()).unwrap();
    let ex = generate_records(&GeneratorConfig::default(), SplitName::Test, 5, 1).unwrap().records;
    let input = SurrogateInput::from_example(&ex[0], &Vocabulary::default()).unwrap();
    let rec = model.forward(&input).unwrap();
    let d = model.width();
    let v = random_orthonormal(1, d, &mut ChaCha8Rng::seed_from_u64(2)).row(0).to_vec();
    for layer in 1..model.n_layers() {
        let h0 = rec.layer_f64(layer - 1)[..d].to_vec();
        let r = curvature_drift_error(|h| model.block_map(layer, h), &h0, &v, &alphas).unwrap();
        assert!(r.r2 >= 0.99, "layer {layer}: R² {}", r.r2);
    }
}

#[test]
fn osp_cases() {
    let out = osp_compose(&[1.0, 0.0], &[-0.33, 0.944]).unwrap();
    assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] - 0.944).abs() < 1e-12);
    let par = osp_compose(&[2.0, 1.0], &[4.0, 2.0]).unwrap();
    assert!((par[0] - 2.0).abs() < 1e-12 && (par[1] - 1.0).abs() < 1e-12);
    assert_eq!(osp_compose(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), vec![1.0, 3.0]);
    assert!(osp_compose(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}

#[test]
fn coactivation_cases() {
    let codes = vec![vec![1.0, 0.5, 0.0], vec![0.0, 0.0, 2.0], vec![0.3, 0.2, 0.0]];
    assert_eq!(coactivation(&codes, &set(&[0]), &set(&[1])), Some(1.0));
    assert_eq!(coactivation(&codes, &set(&[1, 2]), &set(&[0])), Some(2.0 / 3.0));
    assert_eq!(coactivation(&[vec![0.0; 3]], &set(&[0]), &set(&[1])), None);
}
