// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature selectivity, rule-based feature sets and spatial activation maps.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::{index::sample, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationRecord;
use crate::error::{Error, Result};
use crate::sae::SaeParams;
use crate::seed;

/// Default `ε` in the selectivity denominator.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu_pos: f64,
    pub mu_neg: f64,
    /// Population variances.
    pub var_pos: f64,
    pub var_neg: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityTable {
    pub eps: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub features: Vec<FeatureStats>,
}

impl SelectivityTable {
    pub fn sigmas(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.sigma).collect()
    }

    /// CSV with columns `feature,mu_pos,mu_neg,var_pos,var_neg,sigma`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,mu_pos,mu_neg,var_pos,var_neg,sigma\n");
        for (i, f) in self.features.iter().enumerate() {
            s.push_str(&format!(
                "{i},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                f.mu_pos, f.mu_neg, f.var_pos, f.var_neg, f.sigma
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn var(&self) -> f64 {
        (self.m2 / self.n).max(0.0)
    }
}

/// Standardized mean difference of every feature between the positive and
/// negative pools: `(μ⁺ − μ⁻) / sqrt(½(ν⁺ + ν⁻) + ε)`.
pub fn compute_selectivity(codes: &[Vec<f64>], positive: &[bool], eps: f64) -> Result<SelectivityTable> {
    if codes.len() != positive.len() {
        return Err(Error::Shape(format!("{} code rows but {} labels", codes.len(), positive.len())));
    }
    if !(eps >= 0.0) {
        return Err(Error::Invalid(format!("selectivity ε must be non-negative, got {eps}")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!("empty selectivity pool ({n_pos} positive, {n_neg} negative)")));
    }
    let m = codes[0].len();
    if codes.iter().any(|c| c.len() != m) {
        return Err(Error::Shape("ragged code rows".into()));
    }
    let mut pos = vec![Welford::default(); m];
    let mut neg = vec![Welford::default(); m];
    for (row, &p) in codes.iter().zip(positive) {
        let acc = if p { &mut pos } else { &mut neg };
        for (w, &x) in acc.iter_mut().zip(row) {
            w.push(x);
        }
    }
    let features = pos
        .iter()
        .zip(&neg)
        .map(|(p, n)| {
            let (vp, vn) = (p.var(), n.var());
            FeatureStats {
                mu_pos: p.mean,
                mu_neg: n.mean,
                var_pos: vp,
                var_neg: vn,
                sigma: (p.mean - n.mean) / (0.5 * (vp + vn) + eps).sqrt(),
            }
        })
        .collect();
    Ok(SelectivityTable {
        eps,
        n_pos,
        n_neg,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Pattern,
    Global,
    Union,
    RandomControl,
    PermutedControl,
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetKind::Pattern => "pattern",
            SetKind::Global => "global",
            SetKind::Union => "union",
            SetKind::RandomControl => "random_control",
            SetKind::PermutedControl => "permuted_control",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SelectionRule {
    Threshold { tau: f64 },
    TopN { n: usize },
    /// Threshold, falling back to the top `n` when nothing passes.
    ThresholdOrTopN { tau: f64, n: usize },
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::ThresholdOrTopN { tau: 1.5, n: 16 }
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionRule::Threshold { tau } => write!(f, "sigma>={tau}"),
            SelectionRule::TopN { n } => write!(f, "top{n}"),
            SelectionRule::ThresholdOrTopN { tau, n } => write!(f, "sigma>={tau}|top{n}"),
        }
    }
}

/// Sorted, unique feature ids with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub kind: SetKind,
    pub indices: Vec<usize>,
    pub rule: String,
    pub seed: Option<u64>,
}

impl FeatureSet {
    pub fn new(kind: SetKind, indices: impl IntoIterator<Item = usize>, rule: impl Into<String>, seed: Option<u64>) -> Self {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        Self {
            kind,
            indices: set.into_iter().collect(),
            rule: rule.into(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    /// Fraction of a dictionary of size `m` covered by the set.
    pub fn fraction_of(&self, m: usize) -> f64 {
        self.len() as f64 / m as f64
    }
}

fn top_n(sigmas: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sigmas.len()).collect();
    idx.sort_by(|a, b| sigmas[*b].total_cmp(&sigmas[*a]).then(a.cmp(b)));
    idx.truncate(n);
    idx
}

/// Applies `rule` to `table`. Pure in its inputs.
pub fn build_set(table: &SelectivityTable, kind: SetKind, rule: SelectionRule) -> Result<FeatureSet> {
    let sig = table.sigmas();
    let passing = |tau: f64| -> Vec<usize> { (0..sig.len()).filter(|&i| sig[i] >= tau).collect() };
    let indices = match rule {
        SelectionRule::Threshold { tau } => {
            let v = passing(tau);
            if v.is_empty() {
                return Err(Error::Invalid(format!(
                    "no feature reaches selectivity {tau} for the {kind} set; use a top-n rule instead"
                )));
            }
            v
        }
        SelectionRule::TopN { n } => top_n(&sig, n),
        SelectionRule::ThresholdOrTopN { tau, n } => {
            let v = passing(tau);
            if v.is_empty() {
                top_n(&sig, n)
            } else {
                v
            }
        }
    };
    if indices.is_empty() {
        return Err(Error::Invalid(format!("{kind} set is empty")));
    }
    Ok(FeatureSet::new(kind, indices, rule.to_string(), None))
}

pub fn union(a: &FeatureSet, b: &FeatureSet) -> FeatureSet {
    FeatureSet::new(
        SetKind::Union,
        a.indices.iter().chain(&b.indices).copied(),
        format!("{}∪{}", a.kind, b.kind),
        None,
    )
}

/// `size` distinct features drawn uniformly from `0..m`.
pub fn random_control(size: usize, m: usize, seed_value: u64) -> Result<FeatureSet> {
    if size > m {
        return Err(Error::Invalid(format!("cannot draw {size} of {m} features")));
    }
    let mut rng = seed::rng_str(seed_value, "random-control");
    let idx = sample(&mut rng, m, size).into_vec();
    Ok(FeatureSet::new(SetKind::RandomControl, idx, format!("uniform{size}"), Some(seed_value)))
}

/// Seeded shuffle of the candidate `pool`, keeping the first `|reference|`
/// members. The caller matches intervention norms separately.
pub fn permuted_control(reference: &FeatureSet, pool: &[usize], seed_value: u64) -> Result<FeatureSet> {
    let mut pool: Vec<usize> = pool.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if pool.len() < reference.len() {
        return Err(Error::Invalid(format!(
            "pool of {} features cannot host a permutation of {}",
            pool.len(),
            reference.len()
        )));
    }
    pool.shuffle(&mut seed::rng_str(seed_value, "permuted-control"));
    pool.truncate(reference.len());
    Ok(FeatureSet::new(
        SetKind::PermutedControl,
        pool,
        format!("shuffle({})", reference.kind),
        Some(seed_value),
    ))
}

/// Per-example mean over image tokens of the dense code at `layer`.
pub fn pooled_image_codes(records: &[ActivationRecord], sae: &SaeParams, layer: usize) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .map(|r| {
            let mut acc = vec![0.0; sae.m];
            let img = r.mask.image_tokens();
            let n = img.len() as f64;
            if n == 0.0 {
                return Err(Error::Invalid(format!("record `{}` has no image tokens", r.id)));
            }
            for t in img {
                let h: Vec<f64> = r.token(layer, t).iter().map(|&v| f64::from(v)).collect();
                let code = sae.encode_sparse(&h)?;
                for (&j, &v) in code.indices.iter().zip(&code.values) {
                    acc[j] += v / n;
                }
            }
            Ok(acc)
        })
        .collect()
}

/// Features with a non-zero pooled code on at least one example.
pub fn live_features(codes: &[Vec<f64>]) -> Vec<usize> {
    let m = codes.first().map_or(0, Vec::len);
    (0..m).filter(|&j| codes.iter().any(|c| c[j] > 0.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    pub feature: usize,
    pub grid: (usize, usize),
    /// Row-major `H × W`.
    pub values: Vec<f64>,
}

impl SpatialMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.1 + col]
    }
}

/// Code of feature `i` on every image token at `layer`, on the patch grid.
pub fn spatial_map(record: &ActivationRecord, sae: &SaeParams, feature: usize, layer: usize) -> Result<SpatialMap> {
    if feature >= sae.m {
        return Err(Error::Invalid(format!("feature {feature} outside dictionary of {}", sae.m)));
    }
    if layer >= record.n_layers() {
        return Err(Error::Invalid(format!("layer {layer} out of range")));
    }
    if record.mask.n_image() == 0 {
        return Err(Error::Invalid(format!("record `{}` has no image tokens", record.id)));
    }
    let values = record
        .mask
        .image_tokens()
        .map(|t| {
            let h: Vec<f64> = record.token(layer, t).iter().map(|&v| f64::from(v)).collect();
            Ok(sae.encode_sparse(&h)?.get(feature))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpatialMap {
        feature,
        grid: record.mask.grid,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_sigma() {
        // Positive pool {0, 4}: mean 2, variance 4. Negative {−√2, √2}... use
        // variance-2 pools: {2−√2, 2+√2} and {−√2, √2}.
        let r = 2f64.sqrt();
        let codes = vec![vec![2.0 - r], vec![2.0 + r], vec![-r], vec![r]];
        let t = compute_selectivity(&codes, &[true, true, false, false], 0.0).unwrap();
        assert!((t.features[0].sigma - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn infinite_threshold_rejected() {
        let codes = vec![vec![1.0], vec![0.0]];
        let t = compute_selectivity(&codes, &[true, false], DEFAULT_EPS).unwrap();
        assert!(build_set(&t, SetKind::Pattern, SelectionRule::Threshold { tau: f64::INFINITY }).is_err());
        let fallback = build_set(&t, SetKind::Pattern, SelectionRule::ThresholdOrTopN { tau: f64::INFINITY, n: 1 });
        assert_eq!(fallback.unwrap().indices, vec![0]);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(compute_selectivity(&[vec![1.0]], &[true], DEFAULT_EPS).is_err());
    }
}
