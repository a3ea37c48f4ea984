// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{trained, LAYER};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visual_circuits::circuits::{random_control, FeatureSet, SetKind};
use visual_circuits::intervention::{
    apply_intervention, bootstrap, calibrate_norm_match, evaluate_run, grid_argmin, layer_sensitivity_profile, scale_grid,
    scale_sweep, subsample_sweep, zero_ablation_fliprate, BootstrapGrid, CalibrationGrid, EvalMetrics, EvalSet,
    InterventionSpec, LayerSetup, ScaleMode, Site,
};
use visual_circuits::linalg::argmax;

fn eval_set() -> &'static EvalSet {
    static CELL: std::sync::OnceLock<EvalSet> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let fx = trained();
        EvalSet::build(&fx.model, &fx.test_inputs, &fx.sae, LAYER).unwrap()
    })
}

fn random_set(rng: &mut ChaCha8Rng, m: usize) -> FeatureSet {
    let size = rng.gen_range(1..=12);
    let mut all: Vec<usize> = (0..m).collect();
    all.shuffle(rng);
    FeatureSet::new(SetKind::RandomControl, all[..size].to_vec(), "test", None)
}

/// Decode-based oracle: `h + (λ−1)(decode(z_S) − b_dec)` with `z_S` the
/// code restricted to `S`.
fn oracle_token(h: &[f64], fx: &common::Trained, set: &FeatureSet, lambda: f64) -> Vec<f64> {
    let z = fx.sae.encode(h).unwrap();
    let restricted: Vec<f64> = z.iter().enumerate().map(|(j, &v)| if set.contains(j) { v } else { 0.0 }).collect();
    let dec = fx.sae.decode(&restricted).unwrap();
    h.iter().zip(dec.iter().zip(&fx.sae.b_dec)).map(|(&x, (&y, &b))| x + (lambda - 1.0) * (y - b)).collect()
}

#[test]
fn identity_at_unit_scale() {
    let fx = trained();
    let set = eval_set();
    let mask = fx.model.mask();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ex in set.examples.iter().take(100) {
        let spec = InterventionSpec::new(random_set(&mut rng, fx.sae.m), 1.0, LAYER);
        let out = apply_intervention(&ex.state, &mask, &fx.sae, &spec).unwrap();
        assert!(out.state.iter().zip(&ex.state).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(out.delta_norms.iter().all(|&n| n == 0.0));
    }
    let m = evaluate_run(set, &fx.model, &fx.sae, &InterventionSpec::new(fx.union.clone(), 1.0, LAYER), None).unwrap();
    assert_eq!((m.delta_pp, m.chg_pct, m.rel_perturbation), (0.0, 0.0, 0.0));
}

#[test]
fn text_rows_untouched_and_decode_oracle() {
    let fx = trained();
    let set = eval_set();
    let mask = fx.model.mask();
    let d = fx.sae.d;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for ex in set.examples.iter().take(100) {
        let features = random_set(&mut rng, fx.sae.m);
        let lambda = rng.gen_range(0.0..3.0);
        let spec = InterventionSpec::new(features.clone(), lambda, LAYER);
        let out = apply_intervention(&ex.state, &mask, &fx.sae, &spec).unwrap();
        for t in 0..mask.n_tokens {
            let (got, h) = (&out.state[t * d..(t + 1) * d], &ex.state[t * d..(t + 1) * d]);
            if mask.is_image(t) {
                let want = oracle_token(h, fx, &features, lambda);
                worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            } else {
                assert!(got.iter().zip(h).all(|(a, b)| a.to_bits() == b.to_bits()), "text token {t} changed");
            }
        }
    }
    assert!(worst <= 1e-6, "decode oracle deviation {worst}");
}

#[test]
fn single_feature_ablation_removes_its_contribution() {
    let fx = trained();
    let set = eval_set();
    let mask = fx.model.mask();
    let d = fx.sae.d;
    let ex = &set.examples[0];
    let t = mask.image_tokens().start;
    let h = &ex.state[t * d..(t + 1) * d];
    let code = fx.sae.encode_sparse(h).unwrap();
    let (&j, &c) = code.indices.iter().zip(&code.values).find(|(_, &v)| v > 0.0).expect("an active feature");
    let spec = InterventionSpec::new(FeatureSet::new(SetKind::RandomControl, [j], "one", None), 0.0, LAYER);
    let out = apply_intervention(&ex.state, &mask, &fx.sae, &spec).unwrap();
    assert!((out.delta_norms[t] - c).abs() < 1e-9 * c.max(1.0));
}

#[test]
fn delta_is_linear_in_scale() {
    let fx = trained();
    let set = eval_set();
    let mask = fx.model.mask();
    let ex = &set.examples[3];
    let spec = InterventionSpec::new(fx.union.clone(), 2.0, LAYER);
    let base = apply_intervention(&ex.state, &mask, &fx.sae, &spec).unwrap();
    let unit: Vec<f64> = base.state.iter().zip(&ex.state).map(|(a, b)| a - b).collect();
    for lambda in [0.0, 0.5, 2.0] {
        let out = apply_intervention(&ex.state, &mask, &fx.sae, &spec.with_lambda(lambda)).unwrap();
        for ((a, h), u) in out.state.iter().zip(&ex.state).zip(&unit) {
            assert!((a - h - (lambda - 1.0) * u).abs() < 1e-9);
        }
    }
}

#[test]
fn change_rate_ignores_labels_and_matches_double_inference() {
    let fx = trained();
    let set = eval_set();
    let spec = InterventionSpec::new(fx.union.clone(), 0.0, LAYER);
    let outcomes = set.outcomes(&fx.model, &fx.sae, &spec).unwrap();
    let base = EvalMetrics::aggregate(&outcomes, None);

    let mut relabeled = outcomes.clone();
    let mut labels: Vec<usize> = relabeled.iter().map(|o| o.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    for (o, l) in relabeled.iter_mut().zip(labels) {
        o.label = l;
    }
    assert_eq!(EvalMetrics::aggregate(&relabeled, None).chg_pct, base.chg_pct);

    let mask = fx.model.mask();
    let idx: Vec<usize> = (0..50).collect();
    let mut naive = 0usize;
    for &i in &idx {
        let ex = &set.examples[i];
        let clean = argmax(&fx.model.continue_from(&ex.ctx, LAYER, &ex.state).unwrap()).unwrap();
        let edited = apply_intervention(&ex.state, &mask, &fx.sae, &spec).unwrap();
        let pred = argmax(&fx.model.continue_from(&ex.ctx, LAYER, &edited.state).unwrap()).unwrap();
        assert_eq!(clean, ex.clean_pred);
        assert_eq!(pred, outcomes[i].pred, "example {i}");
        naive += usize::from(pred != clean);
    }
    let m = EvalMetrics::aggregate(&outcomes, Some(&idx));
    assert!((m.chg_pct - 100.0 * naive as f64 / 50.0).abs() < 1e-12);
}

#[test]
fn calibration_is_exhaustive_argmin() {
    let fx = trained();
    let set = eval_set();
    let grid = CalibrationGrid::default();
    let reference = InterventionSpec::new(fx.pattern.clone(), 2.0, LAYER);
    let cal = calibrate_norm_match(set, &fx.sae, &reference, &fx.union, &grid).unwrap();

    let target = InterventionSpec::new(fx.union.clone(), 1.0, LAYER);
    let residual = |l: f64| (set.relative_perturbation(&fx.sae, &target.with_lambda(l)) - cal.reference_rel).abs();
    let coarse: Vec<(f64, f64)> = grid.coarse().into_iter().map(|l| (l, residual(l))).collect();
    let (center, _) = grid_argmin(&coarse).unwrap();
    let mut all = coarse;
    all.extend(grid.fine(center).into_iter().map(|l| (l, residual(l))));
    let (want, best) = grid_argmin(&all).unwrap();
    assert_eq!(cal.lambda, want);
    assert!(all.iter().all(|&(_, r)| cal.residual <= r + 1e-15));
    assert!((cal.residual - best).abs() < 1e-15);
    assert!(cal.lambda < 1.0, "union is larger than pattern, so λ* = {} should shrink", cal.lambda);
}

#[test]
fn self_match_recovers_reference() {
    let fx = trained();
    let set = eval_set();
    let reference = InterventionSpec::new(fx.pattern.clone(), 2.0, LAYER);
    let cal = calibrate_norm_match(set, &fx.sae, &reference, &fx.pattern, &CalibrationGrid::default()).unwrap();
    // The coarse grid starts at its step, so the mirror point λ = 0 is not a candidate.
    assert_eq!(cal.lambda, 2.0);
    assert!(cal.residual < 1e-12);
}

#[test]
fn sensitivity_is_zero_at_identity() {
    let fx = trained();
    let layers = [
        LayerSetup {
            layer: LAYER,
            sae: Some(&fx.sae),
            features: fx.union.clone(),
        },
        LayerSetup {
            layer: 2,
            sae: None,
            features: fx.union.clone(),
        },
    ];
    let rows = layer_sensitivity_profile(&fx.model, &layers, ScaleMode::Fixed(1.0), Site::PostMlp, |l, sae| {
        EvalSet::build(&fx.model, &fx.test_inputs[..100], sae, l)
    })
    .unwrap();
    assert_eq!(rows.len(), 1, "layer without an SAE is skipped");
    assert_eq!(rows[0].sensitivity, 0.0);
    assert_eq!(rows[0].chg_pct, 0.0);
}

#[test]
fn scale_sweep_has_one_row_per_scale() {
    let fx = trained();
    let scales = scale_grid(0.0, 2.0, 0.5);
    assert_eq!(scales, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    let rows = scale_sweep(eval_set(), &fx.model, &fx.sae, &InterventionSpec::new(fx.pattern.clone(), 1.0, LAYER), &scales).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[2].drift, 0.0);
    assert_eq!(rows[2].delta_pp, 0.0);
}

#[test]
fn ablation_reports() {
    let fx = trained();
    let set = eval_set();
    let empty = FeatureSet::new(SetKind::Pattern, [], "empty", None);
    let r = zero_ablation_fliprate(set, &fx.model, &fx.sae, &empty, LAYER).unwrap();
    assert_eq!((r.flip_pct, r.set_size), (0.0, 0));

    let p = zero_ablation_fliprate(set, &fx.model, &fx.sae, &fx.pattern, LAYER).unwrap();
    let u = zero_ablation_fliprate(set, &fx.model, &fx.sae, &fx.union, LAYER).unwrap();
    assert_eq!(p.dictionary_fraction, fx.pattern.len() as f64 / fx.sae.m as f64);
    assert!(u.flip_pct >= p.flip_pct, "union {} < pattern {}", u.flip_pct, p.flip_pct);

    let random = random_control(fx.union.len(), fx.sae.m, 7).unwrap();
    assert_eq!(random.len(), fx.union.len());
}

#[test]
fn permutation_onto_itself_changes_nothing() {
    let fx = trained();
    let set = eval_set();
    let same = FeatureSet::new(SetKind::PermutedControl, fx.union.indices.clone(), "perm", Some(0));
    let a = evaluate_run(set, &fx.model, &fx.sae, &InterventionSpec::new(fx.union.clone(), 0.4, LAYER), None).unwrap();
    let b = evaluate_run(set, &fx.model, &fx.sae, &InterventionSpec::new(same, 0.4, LAYER), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bootstrap_grid_and_sweep() {
    let constant = |_: u64, idx: &[usize]| {
        Ok(EvalMetrics {
            base_acc: 0.5,
            acc: 0.4,
            delta_pp: -10.0,
            chg_pct: 12.0,
            rel_perturbation: 0.1,
            n: idx.len(),
        })
    };
    let grid = BootstrapGrid {
        n: 200,
        ..BootstrapGrid::default()
    };
    let r = bootstrap(400, &grid, constant).unwrap();
    assert_eq!(r.runs.len(), 15);
    assert_eq!((r.delta_pp_std, r.chg_std), (0.0, 0.0));
    assert_eq!(r.delta_pp_mean, -10.0);
    assert!(r.runs.iter().all(|run| run.metrics.n == 200));

    assert!(bootstrap(100, &grid, constant).is_err());

    let rows = subsample_sweep(1000, &grid, &[200, 400, 600, 800, 1000], constant).unwrap();
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![200, 400, 600, 800, 1000]);
    assert!(rows.iter().all(|r| r.chg_std == 0.0));
}

#[test]
fn bootstrap_on_real_runs_is_reproducible() {
    let fx = trained();
    let set = eval_set();
    let spec = InterventionSpec::new(fx.union.clone(), 0.0, LAYER);
    let outcomes = set.outcomes(&fx.model, &fx.sae, &spec).unwrap();
    let run = |_: u64, idx: &[usize]| Ok(EvalMetrics::aggregate(&outcomes, Some(idx)));
    let grid = BootstrapGrid {
        n: 300,
        ..BootstrapGrid::default()
    };
    let a = bootstrap(set.len(), &grid, run).unwrap();
    let b = bootstrap(set.len(), &grid, run).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.runs.len(), 15);
}
