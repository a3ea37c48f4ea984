// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interference geometry of feature sets and small numerical laws: SNR,
//! LayerNorm noise amplification, attention entropy, curvature drift and
//! orthogonalized composition of steering vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::{FeatureSet, SetKind};
use crate::error::{Error, Result};
use crate::linalg::{add, axpy, dot, norm, Matrix};
use crate::sae::SaeParams;
use crate::seed;

/// Default NSR above which a perturbation counts as collapsed.
pub const COLLAPSE_NSR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub kind: SetKind,
    pub delta: Vec<f64>,
    pub norm: f64,
    pub n: usize,
}

/// `E_x[Σ_{j∈S} z_j(x) f_j]` over per-example code vectors.
pub fn mean_effective_direction(codes: &[Vec<f64>], sae: &SaeParams, set: &FeatureSet) -> Result<DirectionStats> {
    if codes.is_empty() {
        return Err(Error::Invalid("mean effective direction over an empty split".into()));
    }
    if set.is_empty() {
        return Err(Error::Invalid(format!("{} set is empty", set.kind)));
    }
    if let Some(&j) = set.indices.iter().find(|&&j| j >= sae.m) {
        return Err(Error::Invalid(format!("feature {j} outside dictionary of {}", sae.m)));
    }
    let n = codes.len() as f64;
    let mut delta = vec![0.0; sae.d];
    for &j in &set.indices {
        let mean_z: f64 = codes.iter().map(|c| c[j]).sum::<f64>() / n;
        axpy(mean_z, sae.feature(j), &mut delta);
    }
    let nrm = norm(&delta);
    if !nrm.is_finite() {
        return Err(Error::NonFinite(format!("{} direction", set.kind)));
    }
    Ok(DirectionStats {
        kind: set.kind,
        norm: nrm,
        delta,
        n: codes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interference {
    pub rho: f64,
    pub union_norm: f64,
    /// `‖a + b‖ / (‖a‖ + ‖b‖)`.
    pub union_norm_ratio: f64,
}

pub fn cosine_interference(a: &[f64], b: &[f64]) -> Result<Interference> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("directions of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine undefined for a zero-norm direction".into()));
    }
    let union_norm = norm(&add(a, b));
    Ok(Interference {
        rho: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        union_norm,
        union_norm_ratio: union_norm / (na + nb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: usize,
    pub fraction_negative: f64,
    /// Counts over equal-width cosine bins on `[−1, 1]`.
    pub histogram: Vec<usize>,
}

/// Cosines between decoder directions of every cross-set pair.
pub fn pairwise_alignment(sae: &SaeParams, a: &FeatureSet, b: &FeatureSet, bins: usize) -> Result<Alignment> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("pairwise alignment needs non-empty sets".into()));
    }
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let mut histogram = vec![0; bins];
    let mut negative = 0;
    for &i in &a.indices {
        for &j in &b.indices {
            let (fi, fj) = (sae.feature(i), sae.feature(j));
            let c = (dot(fi, fj) / (norm(fi) * norm(fj))).clamp(-1.0, 1.0);
            negative += usize::from(c < 0.0);
            let bin = (((c + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            histogram[bin] += 1;
        }
    }
    let pairs = a.len() * b.len();
    Ok(Alignment {
        pairs,
        fraction_negative: negative as f64 / pairs as f64,
        histogram,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub snr: f64,
    /// `‖ε‖ / ‖δ‖`; infinite when the signal vanishes.
    pub nsr: f64,
    pub collapse: bool,
}

pub fn snr_analysis(delta: &[f64], noise: &[f64], collapse_nsr: f64) -> Result<SnrReport> {
    let (nd, ne) = (norm(delta), norm(noise));
    if ne == 0.0 {
        return Err(Error::Invalid("SNR needs a non-zero noise vector".into()));
    }
    let nsr = if nd == 0.0 { f64::INFINITY } else { ne / nd };
    Ok(SnrReport {
        snr: (nd * nd) / (ne * ne),
        nsr,
        collapse: nsr > collapse_nsr,
    })
}

/// `γ ⊙ (x − mean) / sqrt(var + eps) + β`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) / s + b)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnSimConfig {
    pub dim: usize,
    /// Expected `‖ε‖`.
    pub noise_norm: f64,
    pub gamma: f64,
    pub beta: f64,
    pub ln_eps: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for LnSimConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            noise_norm: 1.0,
            gamma: 1.0,
            beta: 0.0,
            ln_eps: 1e-5,
            draws: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnCurve {
    /// `(‖δ‖, mean output noise-to-signal ratio)`.
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of `log NSR` against `log ‖δ‖`.
    pub slope: f64,
}

/// Splits LayerNorm outputs of `δ + ε` into signal and noise parts and
/// measures their ratio across a sweep of signal norms.
pub fn layernorm_amplification_sim(direction: &[f64], sweep: &[f64], cfg: &LnSimConfig) -> Result<LnCurve> {
    let d = cfg.dim;
    if direction.len() != d {
        return Err(Error::Shape(format!("direction of length {} for dim {d}", direction.len())));
    }
    if sweep.is_empty() || sweep.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid("LayerNorm sweep values must be positive".into()));
    }
    let mean = direction.iter().sum::<f64>() / d as f64;
    let centered: Vec<f64> = direction.iter().map(|v| v - mean).collect();
    let cn = norm(&centered);
    if cn == 0.0 || cfg.draws == 0 {
        return Err(Error::Invalid("degenerate LayerNorm input: zero-variance signal direction".into()));
    }
    let unit: Vec<f64> = centered.iter().map(|v| v / cn).collect();
    let gamma = vec![cfg.gamma; d];
    let beta = vec![cfg.beta; d];
    let per_dim = cfg.noise_norm / (d as f64).sqrt();
    let points = sweep
        .iter()
        .map(|&s| {
            let mut rng = seed::rng_str(cfg.seed, &format!("ln/{s:e}"));
            let mut total = 0.0;
            for _ in 0..cfg.draws {
                let eps: Vec<f64> = (0..d).map(|_| per_dim * rng.sample::<f64, _>(StandardNormal)).collect();
                let x: Vec<f64> = unit.iter().zip(&eps).map(|(u, e)| s * u + e).collect();
                let out = layer_norm(&x, &gamma, &beta, cfg.ln_eps);
                // The normalizer is shared, so the signal part is the image of δ alone.
                let xm = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / d as f64;
                let scale = cfg.gamma / (var + cfg.ln_eps).sqrt();
                let signal: Vec<f64> = unit.iter().map(|u| scale * s * u).collect();
                let noise: Vec<f64> = out.iter().zip(&signal).map(|(o, g)| o - cfg.beta - g).collect();
                total += norm(&noise) / norm(&signal);
            }
            (s, total / cfg.draws as f64)
        })
        .collect::<Vec<_>>();
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(LnCurve {
        slope: linear_fit(&xs, &ys).0,
        points,
    })
}

/// Least squares `y = a·x + b`; returns `(a, b, R²)`. A perfect fit of
/// constant data has `R² = 1`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let b = my - a * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a * x - b).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    (a, b, r2)
}

/// Shannon entropy (nats) of `softmax(scores)`.
pub fn softmax_entropy(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub patches: usize,
    /// Per-coordinate noise standard deviation.
    pub noise_std: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            patches: 16,
            noise_std: 0.1,
            draws: 200,
            seed: 0,
        }
    }
}

/// Mean attention entropy over queries and noise draws for each signal norm.
/// The signal sits on patch 0 along `direction`; every patch carries
/// isotropic noise.
pub fn attention_entropy_probe(
    w_q: &Matrix,
    w_k: &Matrix,
    direction: &[f64],
    signal_norms: &[f64],
    cfg: &EntropyConfig,
) -> Result<Vec<(f64, f64)>> {
    let d = direction.len();
    if w_q.cols() != d || w_k.cols() != d || w_q.rows() != w_k.rows() || cfg.patches == 0 {
        return Err(Error::Shape("query/key maps do not match the token width".into()));
    }
    let dn = norm(direction);
    if dn == 0.0 {
        return Err(Error::Invalid("signal direction has zero norm".into()));
    }
    let unit: Vec<f64> = direction.iter().map(|v| v / dn).collect();
    let scale = 1.0 / (w_q.rows() as f64).sqrt();
    Ok(signal_norms
        .par_iter()
        .map(|&s| {
            let mut rng = seed::rng_str(cfg.seed, &format!("attention/{s:e}"));
            let mut total = 0.0;
            for _ in 0..cfg.draws {
                let tokens: Vec<Vec<f64>> = (0..cfg.patches)
                    .map(|p| {
                        let mut h: Vec<f64> = (0..d).map(|_| cfg.noise_std * rng.sample::<f64, _>(StandardNormal)).collect();
                        if p == 0 {
                            axpy(s, &unit, &mut h);
                        }
                        h
                    })
                    .collect();
                let q: Vec<Vec<f64>> = tokens.iter().map(|h| w_q.matvec(h)).collect();
                let k: Vec<Vec<f64>> = tokens.iter().map(|h| w_k.matvec(h)).collect();
                for qi in &q {
                    let scores: Vec<f64> = k.iter().map(|kj| scale * dot(qi, kj)).collect();
                    total += softmax_entropy(&scores);
                }
            }
            (s, total / (cfg.draws * cfg.patches) as f64)
        })
        .collect())
}

/// Below this step central second differences lose most of their digits.
pub const MIN_CURVATURE_ALPHA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvaturePoint {
    pub alpha: f64,
    /// `Γ̂(v, v) ≈ [F(h+αv) − 2F(h) + F(h−αv)] / α²`.
    pub gamma: Vec<f64>,
    /// `(α²/2)‖Γ̂(v, v)‖`.
    pub e_drift: f64,
    /// `‖F(h+αv) − F(h) − α·J v‖` with `J v` from central differences.
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub points: Vec<CurvaturePoint>,
    /// Fit of `measured` against `α²`.
    pub slope: f64,
    pub r2: f64,
    pub warnings: Vec<String>,
}

/// Second-order deviation of `f` from its linearization at `h0` along `v`.
pub fn curvature_drift_error<F>(f: F, h0: &[f64], v: &[f64], alphas: &[f64]) -> Result<CurvatureReport>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if h0.len() != v.len() {
        return Err(Error::Shape("base point and direction differ in length".into()));
    }
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Invalid("curvature step sizes must be positive".into()));
    }
    let mut warnings = Vec::new();
    let f0 = f(h0);
    let shifted = |a: f64| -> Vec<f64> { h0.iter().zip(v).map(|(h, d)| h + a * d).collect() };
    let points = alphas
        .iter()
        .map(|&a| {
            if a < MIN_CURVATURE_ALPHA {
                warnings.push(format!(
                    "α = {a:e} is below {MIN_CURVATURE_ALPHA:e}; second differences are dominated by rounding, use α in [1e-3, 1e-1]"
                ));
            }
            let (fp, fm) = (f(&shifted(a)), f(&shifted(-a)));
            let gamma: Vec<f64> = fp.iter().zip(&fm).zip(&f0).map(|((p, m), c)| (p - 2.0 * c + m) / (a * a)).collect();
            // F(h+αv) − F(h) − α·Jv with αJv = (F(h+αv) − F(h−αv))/2.
            let resid: Vec<f64> = fp.iter().zip(&fm).zip(&f0).map(|((p, m), c)| p - c - 0.5 * (p - m)).collect();
            CurvaturePoint {
                alpha: a,
                e_drift: 0.5 * a * a * norm(&gamma),
                measured: norm(&resid),
                gamma,
            }
        })
        .collect::<Vec<_>>();
    let xs: Vec<f64> = points.iter().map(|p| p.alpha * p.alpha).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.measured).collect();
    let (slope, _, r2) = linear_fit(&xs, &ys);
    Ok(CurvatureReport {
        points,
        slope,
        r2,
        warnings,
    })
}

/// `δ_P + (δ_G − proj_{δ_P} δ_G)`.
pub fn osp_compose(dp: &[f64], dg: &[f64]) -> Result<Vec<f64>> {
    if dp.len() != dg.len() {
        return Err(Error::Shape("OSP inputs differ in length".into()));
    }
    let pp = dot(dp, dp);
    if pp == 0.0 {
        return Err(Error::Invalid("OSP needs a non-zero primary direction".into()));
    }
    let c = dot(dg, dp) / pp;
    Ok(dp.iter().zip(dg).map(|(p, g)| p + g - c * p).collect())
}

/// `P(G active | P active)` over examples, where a set is active when any
/// member has a non-zero code. `None` when `P` is never active.
pub fn coactivation(codes: &[Vec<f64>], p: &FeatureSet, g: &FeatureSet) -> Option<f64> {
    let active = |c: &[f64], s: &FeatureSet| s.indices.iter().any(|&j| c[j] != 0.0);
    let (mut np, mut both) = (0usize, 0usize);
    for c in codes {
        if active(c, p) {
            np += 1;
            both += usize::from(active(c, g));
        }
    }
    (np > 0).then(|| both as f64 / np as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub rho: f64,
    pub fraction_negative: f64,
    pub union_norm_ratio: f64,
    pub p_global_given_pattern: Option<f64>,
    pub pattern_norm: f64,
    pub global_norm: f64,
}

/// Everything the interference table needs from one SAE and split.
pub fn interference_report(codes: &[Vec<f64>], sae: &SaeParams, pattern: &FeatureSet, global: &FeatureSet) -> Result<InterferenceReport> {
    let dp = mean_effective_direction(codes, sae, pattern)?;
    let dg = mean_effective_direction(codes, sae, global)?;
    let inter = cosine_interference(&dp.delta, &dg.delta)?;
    let align = pairwise_alignment(sae, pattern, global, 20)?;
    Ok(InterferenceReport {
        rho: inter.rho,
        fraction_negative: align.fraction_negative,
        union_norm_ratio: inter.union_norm_ratio,
        p_global_given_pattern: coactivation(codes, pattern, global),
        pattern_norm: dp.norm,
        global_norm: dg.norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn osp_hand_example() {
        let out = osp_compose(&[1.0, 0.0], &[-0.33, 0.944]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] - 0.944).abs() < 1e-12);
        assert!(osp_compose(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn snr_cases() {
        let r = snr_analysis(&[0.1, 0.0], &[0.0, 1.0], COLLAPSE_NSR).unwrap();
        assert!((r.snr - 0.01).abs() < 1e-12 && (r.nsr - 10.0).abs() < 1e-12 && r.collapse);
        let r = snr_analysis(&[0.0, 0.0], &[0.0, 1.0], COLLAPSE_NSR).unwrap();
        assert!(r.nsr.is_infinite() && r.collapse);
    }

    #[test]
    fn single_patch_entropy_is_zero() {
        assert_eq!(softmax_entropy(&[3.0]), 0.0);
    }
}
