// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multinomial linear probes on pooled layer states.
//!
//! Training is full-batch gradient descent with Armijo backtracking on an
//! L2-regularized cross-entropy, so the objective never increases between
//! iterations.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{pool_tokens, ActivationRecord, PoolScope};
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, mean_std, Matrix};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeHyper {
    /// Weight of `‖W‖²` in the objective.
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm drops below this.
    pub grad_tol: f64,
    /// Fraction of the training pool each seed trains on.
    pub subsample: f64,
    /// Standardize features with training-pool statistics.
    pub standardize: bool,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 150,
            grad_tol: 1e-6,
            subsample: 0.9,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `C × d`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub n_classes: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl ProbeModel {
    fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.shift.iter().zip(&self.scale)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z = self.transform(x);
        let mut out = self.weights.matvec(&z);
        out.iter_mut().zip(&self.bias).for_each(|(o, b)| *o += b);
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x)).unwrap_or(0)
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }
}

/// Objective value after every accepted iteration, starting at the init.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrace {
    pub objective: Vec<f64>,
}

fn check_labels(labels: &[usize], n_classes: usize, n: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Invalid(format!("a probe needs at least 2 classes, got {n_classes}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n < n_classes {
        return Err(Error::Invalid(format!("{n} examples for {n_classes} classes")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Invalid("degenerate probe input: a single class".into()));
    }
    Ok(())
}

/// Mean cross-entropy plus `l2·‖W‖²`, and its gradient when asked.
fn objective(
    w: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    c: usize,
    d: usize,
    l2: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut g_acc = grad.as_ref().map(|_| vec![0.0; c * (d + 1)]);
    let mut logits = vec![0.0; c];
    for (x, &y) in xs.iter().zip(ys) {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(&w[k * d..(k + 1) * d], x) + w[c * d + k];
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        loss -= (logits[y] / z).ln();
        if let Some(g) = g_acc.as_mut() {
            for k in 0..c {
                let p = logits[k] / z - if k == y { 1.0 } else { 0.0 };
                if p != 0.0 {
                    for (gi, xi) in g[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gi += p * xi;
                    }
                    g[c * d + k] += p;
                }
            }
        }
    }
    let reg: f64 = w[..c * d].iter().map(|v| v * v).sum::<f64>() * l2;
    if let (Some(out), Some(g)) = (grad, g_acc) {
        for (i, (o, gi)) in out.iter_mut().zip(&g).enumerate() {
            *o = gi / n + if i < c * d { 2.0 * l2 * w[i] } else { 0.0 };
        }
    }
    loss / n + reg
}

/// Trains a probe on all rows; `seed` sets the initialization.
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    hyper: &ProbeHyper,
    seed_value: u64,
) -> Result<(ProbeModel, ProbeTrace)> {
    check_labels(labels, n_classes, features.len())?;
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("ragged probe features".into()));
    }
    let (shift, scale) = if hyper.standardize {
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col: Vec<f64> = features.iter().map(|f| f[j]).collect();
            let (m, s) = mean_std(&col);
            shift[j] = m;
            scale[j] = if s > 1e-12 { s } else { 1.0 };
        }
        (shift, scale)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(shift.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();

    let c = n_classes;
    let mut rng = seed::rng_str(seed_value, "probe-init");
    let mut w = Matrix::gaussian(1, c * (d + 1), 0.01, &mut rng).into_vec();
    let mut grad = vec![0.0; w.len()];
    let mut f = objective(&w, &xs, labels, c, d, hyper.l2, Some(&mut grad));
    let mut trace = vec![f];
    let mut step = 1.0;
    for _ in 0..hyper.max_iters {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < hyper.grad_tol {
            break;
        }
        let mut accepted = false;
        step *= 2.0;
        for _ in 0..60 {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let fc = objective(&cand, &xs, labels, c, d, hyper.l2, None);
            if fc <= f - 1e-4 * step * gnorm2 {
                w = cand;
                f = objective(&w, &xs, labels, c, d, hyper.l2, Some(&mut grad));
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if !f.is_finite() {
            return Err(Error::NonFinite("probe objective".into()));
        }
        trace.push(f);
    }
    let weights = Matrix::from_vec(c, d, w[..c * d].to_vec());
    let bias = w[c * d..].to_vec();
    Ok((
        ProbeModel {
            weights,
            bias,
            n_classes: c,
            shift,
            scale,
        },
        ProbeTrace { objective: trace },
    ))
}

/// Pooled features for every layer: `[layer][example][d]`.
pub fn pooled_features(records: &[ActivationRecord], scope: PoolScope) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_layers = records.first().map_or(0, ActivationRecord::n_layers);
    (0..n_layers)
        .map(|l| records.iter().map(|r| pool_tokens(r, l, scope)).collect())
        .collect()
}

/// A labelled pool of features at every layer.
#[derive(Debug, Clone)]
pub struct ProbeData<'a> {
    pub layers: &'a [Vec<Vec<f64>>],
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub shuffled_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: Vec<LayerResult>,
    /// Layer with the highest mean validation accuracy (lowest on ties).
    pub best_layer: usize,
    pub shuffled_acc: f64,
}

fn subsample(n: usize, frac: f64, seed_value: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if frac >= 1.0 {
        return idx;
    }
    idx.shuffle(&mut seed::rng_str(seed_value, "probe-subsample"));
    idx.truncate(((n as f64) * frac).round().max(1.0) as usize);
    idx.sort_unstable();
    idx
}

/// Trains on `train` at `layer` (labels optionally permuted), evaluates on `val`.
pub fn probe_accuracy(
    train: &ProbeData<'_>,
    val: &ProbeData<'_>,
    layer: usize,
    n_classes: usize,
    hyper: &ProbeHyper,
    seed_value: u64,
    permutation: Option<&[usize]>,
) -> Result<f64> {
    let idx = subsample(train.labels.len(), hyper.subsample, seed_value);
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| train.layers[layer][i].clone()).collect();
    let ys: Vec<usize> = idx
        .iter()
        .map(|&i| permutation.map_or(train.labels[i], |p| train.labels[p[i]]))
        .collect();
    let (probe, _) = train_probe(&xs, &ys, n_classes, hyper, seed_value)?;
    Ok(probe.accuracy(&val.layers[layer], val.labels))
}

/// Seeded permutation of `0..n`.
pub fn label_permutation(n: usize, seed_value: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut seed::rng_str(seed_value, "label-shuffle"));
    p
}

/// Mean held-out accuracy of probes trained on shuffled labels.
pub fn shuffled_label_control(
    train: &ProbeData<'_>,
    val: &ProbeData<'_>,
    layer: usize,
    n_classes: usize,
    hyper: &ProbeHyper,
    seeds: &[u64],
) -> Result<f64> {
    let accs = seeds
        .par_iter()
        .map(|&s| {
            let perm = label_permutation(train.labels.len(), s);
            probe_accuracy(train, val, layer, n_classes, hyper, s, Some(&perm))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&accs).0)
}

/// One probe per layer per seed; reports the trajectory and `l*`.
pub fn layer_sweep(
    train: &ProbeData<'_>,
    val: &ProbeData<'_>,
    n_classes: usize,
    hyper: &ProbeHyper,
    seeds: &[u64],
) -> Result<ProbeReport> {
    if seeds.is_empty() {
        return Err(Error::Invalid("layer sweep needs at least one seed".into()));
    }
    let n_layers = train.layers.len();
    let jobs: Vec<(usize, u64)> = (0..n_layers).flat_map(|l| seeds.iter().map(move |&s| (l, s))).collect();
    let accs = jobs
        .par_iter()
        .map(|&(l, s)| probe_accuracy(train, val, l, n_classes, hyper, s, None))
        .collect::<Result<Vec<_>>>()?;
    let shuffled = (0..n_layers)
        .into_par_iter()
        .map(|l| shuffled_label_control(train, val, l, n_classes, hyper, seeds))
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<LayerResult> = (0..n_layers)
        .map(|l| {
            let (m, s) = mean_std(&accs[l * seeds.len()..(l + 1) * seeds.len()]);
            LayerResult {
                layer: l,
                mean_acc: m,
                std_acc: s,
                shuffled_acc: shuffled[l],
            }
        })
        .collect();
    let means: Vec<f64> = layers.iter().map(|r| r.mean_acc).collect();
    let best_layer = argmax(&means).ok_or_else(|| Error::Invalid("no layers to sweep".into()))?;
    Ok(ProbeReport {
        shuffled_acc: layers[best_layer].shuffled_acc,
        best_layer,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_class() {
        let xs: Vec<Vec<f64>> = (0..100).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![-1.0, 0.0] }).collect();
        let ys: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let (p, trace) = train_probe(&xs, &ys, 2, &ProbeHyper::default(), 1).unwrap();
        assert_eq!(p.accuracy(&xs, &ys), 1.0);
        assert!(trace.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn zero_features_give_majority() {
        let xs = vec![vec![0.0; 3]; 10];
        let ys = vec![0, 0, 0, 0, 0, 0, 1, 1, 2, 2];
        let (p, _) = train_probe(&xs, &ys, 3, &ProbeHyper::default(), 0).unwrap();
        assert!((p.accuracy(&xs, &ys) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![vec![1.0]; 4];
        assert!(train_probe(&xs, &[1, 1, 1, 1], 2, &ProbeHyper::default(), 0).is_err());
    }
}
