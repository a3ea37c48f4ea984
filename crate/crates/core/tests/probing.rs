// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use visual_circuits::activation::{PoolScope, SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::probing::{
    label_permutation, layer_sweep, pooled_features, probe_accuracy, shuffled_label_control, train_probe, ProbeData, ProbeHyper,
};
use visual_circuits::svr::{generate_records, GeneratorConfig, SplitName, Vocabulary};

fn noise(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn uniform_labels(n: usize, c: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..c)).collect()
}

#[test]
fn plus_minus_e1_is_separable() {
    let xs: Vec<Vec<f64>> = (0..100).map(|i| if i % 2 == 0 { vec![1.0, 0.0, 0.0] } else { vec![-1.0, 0.0, 0.0] }).collect();
    let ys: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let (p, trace) = train_probe(&xs, &ys, 2, &ProbeHyper::default(), 0).unwrap();
    assert_eq!(p.accuracy(&xs, &ys), 1.0);
    assert!(trace.objective.windows(2).all(|w| w[1] <= w[0] + 1e-6));
}

#[test]
fn noise_features_probe_near_chance() {
    let (tr, va) = (noise(1500, 32, 1), noise(3000, 32, 2));
    let (ytr, yva) = (uniform_labels(1500, 7, 3), uniform_labels(3000, 7, 4));
    let (p, _) = train_probe(&tr, &ytr, 7, &ProbeHyper::default(), 0).unwrap();
    let acc = p.accuracy(&va, &yva);
    assert!((0.10..=0.19).contains(&acc), "{acc}");
}

#[test]
fn zero_features_predict_the_majority_class() {
    let xs = vec![vec![0.0; 4]; 90];
    let ys: Vec<usize> = (0..90).map(|i| if i < 50 { 2 } else if i < 75 { 0 } else { 1 }).collect();
    let (p, _) = train_probe(&xs, &ys, 3, &ProbeHyper::default(), 0).unwrap();
    assert!((p.accuracy(&xs, &ys) - 50.0 / 90.0).abs() < 1e-12);
}

#[test]
fn single_class_is_rejected() {
    let xs = noise(10, 2, 0);
    assert!(train_probe(&xs, &[1; 10], 3, &ProbeHyper::default(), 0).is_err());
}

#[test]
fn objective_is_monotone_on_noise() {
    let xs = noise(300, 16, 5);
    let ys = uniform_labels(300, 7, 6);
    let (_, trace) = train_probe(&xs, &ys, 7, &ProbeHyper::default(), 0).unwrap();
    assert!(trace.objective.windows(2).all(|w| w[1] <= w[0] + 1e-6));
}

#[test]
fn shuffle_controls_on_noise_features() {
    let layers = vec![noise(1500, 24, 7)];
    let val = vec![noise(3000, 24, 8)];
    let ytr = uniform_labels(1500, 7, 9);
    let yva = uniform_labels(3000, 7, 10);
    let (tr, va) = (ProbeData { layers: &layers, labels: &ytr }, ProbeData { layers: &val, labels: &yva });
    let h = ProbeHyper::default();
    let a = shuffled_label_control(&tr, &va, 0, 7, &h, &[1]).unwrap();
    let b = shuffled_label_control(&tr, &va, 0, 7, &h, &[2]).unwrap();
    assert!((a - b).abs() <= 0.03, "{a} vs {b}");
}

fn surrogate_data(split: SplitName, seed: u64, n: usize) -> (Vec<Vec<Vec<f64>>>, Vec<usize>) {
    let model = SurrogateModel::new(SurrogateConfig::default()).unwrap();
    let vocab = Vocabulary::default();
    let ex = generate_records(&GeneratorConfig::default(), split, seed, n).unwrap().records;
    let xs: Vec<SurrogateInput> = ex.iter().map(|e| SurrogateInput::from_example(e, &vocab).unwrap()).collect();
    let feats = pooled_features(&model.forward_batch(&xs).unwrap(), PoolScope::All).unwrap();
    (feats, ex.iter().map(|e| e.task_type.index()).collect())
}

#[test]
fn surrogate_trajectory_peaks_at_the_plant() {
    let (ftr, ytr) = surrogate_data(SplitName::Train, 21, 800);
    let (fva, yva) = surrogate_data(SplitName::Val, 22, 400);
    let (tr, va) = (ProbeData { layers: &ftr, labels: &ytr }, ProbeData { layers: &fva, labels: &yva });
    let h = ProbeHyper::default();
    let r = layer_sweep(&tr, &va, 7, &h, &[0]).unwrap();
    assert_eq!(r.best_layer, 5);
    let acc: Vec<f64> = r.layers.iter().map(|l| l.mean_acc).collect();
    for l in 0..5 {
        assert!(acc[l + 1] >= acc[l] - 0.02, "layer {l}→{}: {:?}", l + 1, acc);
        assert!(acc[l] <= 0.40);
    }
    assert!(acc[5] >= 0.95);

    // The identity permutation is no shuffle at all.
    let id: Vec<usize> = (0..ytr.len()).collect();
    let plain = probe_accuracy(&tr, &va, 5, 7, &h, 3, None).unwrap();
    let ident = probe_accuracy(&tr, &va, 5, 7, &h, 3, Some(&id)).unwrap();
    assert_eq!(plain, ident);

    let perm = label_permutation(ytr.len(), 4);
    let shuffled = probe_accuracy(&tr, &va, 5, 7, &h, 4, Some(&perm)).unwrap();
    assert!(shuffled < 0.25, "{shuffled}");
}
