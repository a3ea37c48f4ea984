// SPDX-License-Identifier: MIT OR Apache-2.0

//! Masked feature-scaling interventions on image tokens, evaluation against
//! the surrogate, norm-matched calibration, controls and the bootstrap grid.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::surrogate::{finish_logits, N_CHANNELS};
use crate::activation::{ExampleContext, SurrogateInput, SurrogateModel, TokenRoleMask};
use crate::circuits::{self, FeatureSet, SetKind};
use crate::error::{Error, Result};
use crate::linalg::{argmax, axpy, mean_std, norm};
use crate::sae::{SaeParams, SparseCode};
use crate::seed;

/// Where the edited state sits relative to block `layer`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Output of block `layer`.
    #[default]
    PostMlp,
    /// Input of block `layer`, i.e. the output of block `layer − 1`.
    PreBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub features: FeatureSet,
    pub lambda: f64,
    /// Optional per-feature scales aligned with `features.indices`.
    pub per_feature: Option<Vec<f64>>,
    pub layer: usize,
    pub site: Site,
}

impl InterventionSpec {
    pub fn new(features: FeatureSet, lambda: f64, layer: usize) -> Self {
        Self {
            features,
            lambda,
            per_feature: None,
            layer,
            site: Site::PostMlp,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            per_feature: None,
            ..self.clone()
        }
    }

    /// Index of the recorded state that the intervention edits.
    pub fn state_layer(&self) -> Result<usize> {
        match self.site {
            Site::PostMlp => Ok(self.layer),
            Site::PreBlock => self
                .layer
                .checked_sub(1)
                .ok_or_else(|| Error::Invalid("pre_block intervention needs layer ≥ 1".into())),
        }
    }

    pub fn validate(&self, m: usize, n_layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Invalid(format!("scale λ must be finite and non-negative, got {}", self.lambda)));
        }
        if self.layer >= n_layers {
            return Err(Error::Invalid(format!("layer {} out of range for {n_layers} layers", self.layer)));
        }
        self.state_layer()?;
        if let Some(&j) = self.features.indices.iter().find(|&&j| j >= m) {
            return Err(Error::Invalid(format!("feature {j} outside dictionary of {m}")));
        }
        if let Some(pf) = &self.per_feature {
            if pf.len() != self.features.len() {
                return Err(Error::Shape(format!(
                    "{} per-feature scales for {} features",
                    pf.len(),
                    self.features.len()
                )));
            }
            if pf.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
                return Err(Error::Invalid("per-feature scales must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    fn coefficient(&self, pos: usize) -> f64 {
        self.per_feature.as_ref().map_or(self.lambda, |v| v[pos]) - 1.0
    }
}

/// `Σ_{j∈S} (λ_j − 1) z_j f_j` for one token code; `None` when it is zero
/// by construction.
fn token_delta(code: &SparseCode, sae: &SaeParams, spec: &InterventionSpec) -> Option<Vec<f64>> {
    let mut delta: Option<Vec<f64>> = None;
    for (&j, &z) in code.indices.iter().zip(&code.values) {
        let Ok(pos) = spec.features.indices.binary_search(&j) else { continue };
        let c = spec.coefficient(pos) * z;
        if c != 0.0 {
            axpy(c, sae.feature(j), delta.get_or_insert_with(|| vec![0.0; sae.d]));
        }
    }
    delta
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervened {
    /// `T × d` edited state.
    pub state: Vec<f64>,
    /// `‖Δ_t‖` per token (zero on text tokens).
    pub delta_norms: Vec<f64>,
    /// `‖Δ_t‖ / ‖h_t‖` per image token.
    pub relative: Vec<f64>,
}

impl Intervened {
    pub fn mean_relative(&self) -> f64 {
        if self.relative.is_empty() {
            0.0
        } else {
            self.relative.iter().sum::<f64>() / self.relative.len() as f64
        }
    }
}

/// Applies the masked operator to a `T × d` state. Text rows are copied.
pub fn apply_intervention(state: &[f64], mask: &TokenRoleMask, sae: &SaeParams, spec: &InterventionSpec) -> Result<Intervened> {
    let d = sae.d;
    if state.len() != mask.n_tokens * d {
        return Err(Error::Shape(format!(
            "state has {} values, expected {}×{d}",
            state.len(),
            mask.n_tokens
        )));
    }
    if let Some(&j) = spec.features.indices.iter().find(|&&j| j >= sae.m) {
        return Err(Error::Invalid(format!("feature {j} outside dictionary of {}", sae.m)));
    }
    let mut out = state.to_vec();
    let mut delta_norms = vec![0.0; mask.n_tokens];
    let mut relative = Vec::with_capacity(mask.n_image());
    for t in mask.image_tokens() {
        let h = &state[t * d..(t + 1) * d];
        let code = sae.encode_sparse(h)?;
        let dn = match token_delta(&code, sae, spec) {
            Some(delta) => {
                axpy(1.0, &delta, &mut out[t * d..(t + 1) * d]);
                norm(&delta)
            }
            None => 0.0,
        };
        delta_norms[t] = dn;
        relative.push(ratio(dn, norm(h)));
    }
    Ok(Intervened {
        state: out,
        delta_norms,
        relative,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One example prepared for repeated interventions: context, edited-state
/// snapshot, per-token image codes and clean per-token readout tails.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub ctx: ExampleContext,
    pub label: usize,
    pub state: Vec<f64>,
    pub clean_pred: usize,
    codes: Vec<SparseCode>,
    token_norms: Vec<f64>,
    clean_tails: Vec<Vec<f64>>,
}

/// A split prepared for evaluation at one recorded state layer.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub state_layer: usize,
    pub examples: Vec<EvalExample>,
}

impl EvalSet {
    /// Runs clean forward passes and caches everything that does not depend
    /// on the intervention. States are rounded through `f32`, matching shards.
    pub fn build(model: &SurrogateModel, inputs: &[SurrogateInput], sae: &SaeParams, state_layer: usize) -> Result<Self> {
        if state_layer >= model.n_layers() {
            return Err(Error::Invalid(format!("state layer {state_layer} out of range")));
        }
        if sae.d != model.width() {
            return Err(Error::Shape(format!("SAE width {} but model width {}", sae.d, model.width())));
        }
        inputs
            .par_iter()
            .map(|input| {
                let ctx = model.context(input)?;
                let state = model.forward_ctx(&ctx)?.layer_f64(state_layer);
                Self::prepare(model, sae, ctx, state_layer, state)
            })
            .collect::<Result<Vec<_>>>()
            .map(|examples| Self { state_layer, examples })
    }

    /// Uses recorded states (`T × d` at `state_layer`, aligned with `inputs`)
    /// instead of re-running the network up to that layer.
    pub fn from_states(
        model: &SurrogateModel,
        inputs: &[SurrogateInput],
        states: Vec<Vec<f64>>,
        sae: &SaeParams,
        state_layer: usize,
    ) -> Result<Self> {
        if state_layer >= model.n_layers() {
            return Err(Error::Invalid(format!("state layer {state_layer} out of range")));
        }
        if states.len() != inputs.len() {
            return Err(Error::Shape(format!("{} states for {} inputs", states.len(), inputs.len())));
        }
        let expect = model.n_tokens() * model.width();
        if let Some(i) = states.iter().position(|s| s.len() != expect) {
            return Err(Error::Shape(format!("state of `{}` has the wrong size", inputs[i].id)));
        }
        inputs
            .par_iter()
            .zip(states)
            .map(|(input, state)| Self::prepare(model, sae, model.context(input)?, state_layer, state))
            .collect::<Result<Vec<_>>>()
            .map(|examples| Self { state_layer, examples })
    }

    fn prepare(model: &SurrogateModel, sae: &SaeParams, ctx: ExampleContext, state_layer: usize, state: Vec<f64>) -> Result<EvalExample> {
        if sae.d != model.width() {
            return Err(Error::Shape(format!("SAE width {} but model width {}", sae.d, model.width())));
        }
        let mask = model.mask();
        let d = model.width();
        let clean_tails: Vec<Vec<f64>> = (0..mask.n_tokens)
            .map(|t| model.token_tail(&ctx, state_layer, t, &state[t * d..(t + 1) * d]))
            .collect();
        let codes = mask
            .image_tokens()
            .map(|t| sae.encode_sparse(&state[t * d..(t + 1) * d]))
            .collect::<Result<Vec<_>>>()?;
        let token_norms = mask.image_tokens().map(|t| norm(&state[t * d..(t + 1) * d])).collect();
        let clean_pred = predict(&clean_tails, mask.n_tokens, ctx.input.n_options);
        Ok(EvalExample {
            label: ctx.input.answer,
            ctx,
            state,
            clean_pred,
            codes,
            token_norms,
            clean_tails,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Per-example predictions under `spec`, in split order.
    pub fn outcomes(&self, model: &SurrogateModel, sae: &SaeParams, spec: &InterventionSpec) -> Result<Vec<Outcome>> {
        spec.validate(sae.m, model.n_layers())?;
        if spec.state_layer()? != self.state_layer {
            return Err(Error::Invalid(format!(
                "spec edits state {} but the evaluation set holds state {}",
                spec.state_layer()?,
                self.state_layer
            )));
        }
        let mask = model.mask();
        let d = model.width();
        Ok(self
            .examples
            .par_iter()
            .map(|ex| {
                let mut acc = vec![0.0; N_CHANNELS];
                let mut rel = 0.0;
                for t in 0..mask.n_tokens {
                    let delta = if mask.is_image(t) {
                        token_delta(&ex.codes[t], sae, spec)
                    } else {
                        None
                    };
                    match delta {
                        Some(delta) => {
                            rel += ratio(norm(&delta), ex.token_norms[t]);
                            let mut h = ex.state[t * d..(t + 1) * d].to_vec();
                            axpy(1.0, &delta, &mut h);
                            axpy(1.0, &model.token_tail(&ex.ctx, self.state_layer, t, &h), &mut acc);
                        }
                        None => axpy(1.0, &ex.clean_tails[t], &mut acc),
                    }
                }
                let logits = finish_logits(acc, mask.n_tokens, ex.ctx.input.n_options);
                Outcome {
                    clean_pred: ex.clean_pred,
                    pred: argmax(&logits).unwrap_or(0),
                    label: ex.label,
                    rel: rel / mask.n_image().max(1) as f64,
                }
            })
            .collect())
    }

    /// `E[‖Δ‖/‖h‖]` under `spec` without running the network.
    pub fn relative_perturbation(&self, sae: &SaeParams, spec: &InterventionSpec) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .examples
            .iter()
            .map(|ex| {
                let s: f64 = ex
                    .codes
                    .iter()
                    .zip(&ex.token_norms)
                    .map(|(c, &n)| token_delta(c, sae, spec).map_or(0.0, |dl| ratio(norm(&dl), n)))
                    .sum();
                s / ex.codes.len().max(1) as f64
            })
            .sum();
        total / self.examples.len() as f64
    }

    /// Per-example image-pooled dense codes, as used for selectivity.
    pub fn pooled_codes(&self, m: usize) -> Vec<Vec<f64>> {
        self.examples
            .iter()
            .map(|ex| {
                let mut acc = vec![0.0; m];
                let n = ex.codes.len() as f64;
                for c in &ex.codes {
                    for (&j, &v) in c.indices.iter().zip(&c.values) {
                        acc[j] += v / n;
                    }
                }
                acc
            })
            .collect()
    }
}

fn predict(tails: &[Vec<f64>], n_tokens: usize, n_options: usize) -> usize {
    let mut acc = vec![0.0; N_CHANNELS];
    for t in tails {
        axpy(1.0, t, &mut acc);
    }
    argmax(&finish_logits(acc, n_tokens, n_options)).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub clean_pred: usize,
    pub pred: usize,
    pub label: usize,
    /// Mean `‖Δ_t‖/‖h_t‖` over the example's image tokens.
    pub rel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub base_acc: f64,
    pub acc: f64,
    pub delta_pp: f64,
    pub chg_pct: f64,
    pub rel_perturbation: f64,
    pub n: usize,
}

impl EvalMetrics {
    /// Aggregates the outcomes at `indices` (all outcomes when `None`).
    pub fn aggregate(outcomes: &[Outcome], indices: Option<&[usize]>) -> Self {
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..outcomes.len()).collect();
                &all
            }
        };
        let n = idx.len();
        if n == 0 {
            return Self {
                base_acc: 0.0,
                acc: 0.0,
                delta_pp: 0.0,
                chg_pct: 0.0,
                rel_perturbation: 0.0,
                n: 0,
            };
        }
        let (mut base, mut acc, mut chg, mut rel) = (0usize, 0usize, 0usize, 0.0);
        for &i in idx {
            let o = &outcomes[i];
            base += usize::from(o.clean_pred == o.label);
            acc += usize::from(o.pred == o.label);
            chg += usize::from(o.pred != o.clean_pred);
            rel += o.rel;
        }
        let nf = n as f64;
        Self {
            base_acc: base as f64 / nf,
            acc: acc as f64 / nf,
            delta_pp: 100.0 * (acc as f64 - base as f64) / nf,
            chg_pct: 100.0 * chg as f64 / nf,
            rel_perturbation: rel / nf,
            n,
        }
    }
}

/// `n` sorted indices drawn without replacement from `0..len`.
pub fn subsample_indices(len: usize, n: usize, seed_value: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Invalid(format!("subsample of {n} exceeds split size {len}")));
    }
    let mut idx = sample(&mut seed::rng_str(seed_value, "subsample"), len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Clean and intervened predictions on `set`, optionally on a subsample.
pub fn evaluate_run(
    set: &EvalSet,
    model: &SurrogateModel,
    sae: &SaeParams,
    spec: &InterventionSpec,
    subsample: Option<(usize, u64)>,
) -> Result<EvalMetrics> {
    let outcomes = set.outcomes(model, sae, spec)?;
    match subsample {
        Some((n, s)) => Ok(EvalMetrics::aggregate(&outcomes, Some(&subsample_indices(outcomes.len(), n, s)?))),
        None => Ok(EvalMetrics::aggregate(&outcomes, None)),
    }
}

/// Residuals closer than this count as ties; ties go to the smaller λ.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationGrid {
    pub coarse_step: f64,
    pub coarse_max: f64,
    pub fine_step: f64,
    /// Half-width of the refinement window around the coarse argmin.
    pub fine_radius: f64,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            coarse_step: 0.1,
            coarse_max: 2.0,
            fine_step: 0.01,
            fine_radius: 0.1,
        }
    }
}

impl CalibrationGrid {
    fn steps(step: f64, lo: f64, hi: f64) -> Vec<f64> {
        let per_unit = (1.0 / step).round();
        let (a, b) = ((lo * per_unit).round() as i64, (hi * per_unit).round() as i64);
        (a.max(0)..=b).map(|i| i as f64 / per_unit).collect()
    }

    pub fn coarse(&self) -> Vec<f64> {
        Self::steps(self.coarse_step, self.coarse_step, self.coarse_max)
    }

    pub fn fine(&self, center: f64) -> Vec<f64> {
        Self::steps(self.fine_step, center - self.fine_radius, center + self.fine_radius)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda: f64,
    pub residual: f64,
    pub reference_rel: f64,
    pub target_rel: f64,
    /// Every evaluated `(λ, residual)` pair, coarse pass first.
    pub evaluated: Vec<(f64, f64)>,
}

/// Smallest λ among the near-minimal residuals.
pub fn grid_argmin(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let best = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    points
        .iter()
        .filter(|p| p.1 <= best + TIE_TOLERANCE)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .copied()
}

/// Chooses λ for `target` so that its mean relative perturbation matches
/// that of `reference`.
pub fn calibrate_norm_match(
    set: &EvalSet,
    sae: &SaeParams,
    reference: &InterventionSpec,
    target: &FeatureSet,
    grid: &CalibrationGrid,
) -> Result<Calibration> {
    let reference_rel = set.relative_perturbation(sae, reference);
    calibrate_to(set, sae, reference, target, reference_rel, grid)
}

/// As [`calibrate_norm_match`] against an explicit perturbation level.
pub fn calibrate_to(
    set: &EvalSet,
    sae: &SaeParams,
    template: &InterventionSpec,
    target: &FeatureSet,
    reference_rel: f64,
    grid: &CalibrationGrid,
) -> Result<Calibration> {
    let mut spec = template.clone();
    spec.features = target.clone();
    spec.per_feature = None;
    let residuals = |spec: &mut InterventionSpec, grid: Vec<f64>| -> Vec<(f64, f64)> {
        grid.into_iter()
            .map(|l| {
                spec.lambda = l;
                (l, (set.relative_perturbation(sae, spec) - reference_rel).abs())
            })
            .collect()
    };
    let mut evaluated = residuals(&mut spec, grid.coarse());
    let (center, _) = grid_argmin(&evaluated).ok_or_else(|| Error::Invalid("empty calibration grid".into()))?;
    evaluated.extend(residuals(&mut spec, grid.fine(center)));
    let (lambda, residual) = grid_argmin(&evaluated).expect("grid is non-empty");
    spec.lambda = lambda;
    Ok(Calibration {
        lambda,
        residual,
        reference_rel,
        target_rel: set.relative_perturbation(sae, &spec),
        evaluated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: usize,
    pub lambda: f64,
    pub delta_pp: f64,
    /// `|ΔAcc|` in percentage points.
    pub sensitivity: f64,
    pub chg_pct: f64,
    pub rel_perturbation: f64,
}

/// One layer of a sensitivity profile: an SAE and the set to scale there.
pub struct LayerSetup<'a> {
    pub layer: usize,
    pub sae: Option<&'a SaeParams>,
    pub features: FeatureSet,
}

/// How the scale is chosen per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScaleMode {
    Fixed(f64),
    /// Calibrate each layer's λ to this mean relative perturbation.
    NormMatched(f64),
}

/// `S(l) = |ΔAcc|` for each configured layer. Layers without an SAE are
/// skipped with a warning.
///
/// `build(state_layer, sae)` prepares the evaluation split for one layer,
/// e.g. `|l, sae| EvalSet::build(model, inputs, sae, l)`.
pub fn layer_sensitivity_profile<B>(
    model: &SurrogateModel,
    layers: &[LayerSetup<'_>],
    mode: ScaleMode,
    site: Site,
    build: B,
) -> Result<Vec<SensitivityRow>>
where
    B: Fn(usize, &SaeParams) -> Result<EvalSet>,
{
    let mut rows = Vec::new();
    for setup in layers {
        let Some(sae) = setup.sae else {
            log::warn!("no SAE for layer {}; skipping", setup.layer);
            continue;
        };
        let mut spec = InterventionSpec::new(setup.features.clone(), 1.0, setup.layer);
        spec.site = site;
        let set = build(spec.state_layer()?, sae)?;
        spec.lambda = match mode {
            ScaleMode::Fixed(l) => l,
            ScaleMode::NormMatched(target) => {
                // Steering side of the identity: search λ ≥ 1.
                let up = |l: f64| spec.with_lambda(l);
                let unit = set.relative_perturbation(sae, &up(2.0));
                if unit == 0.0 {
                    1.0
                } else {
                    1.0 + target / unit
                }
            }
        };
        let m = evaluate_run(&set, model, sae, &spec, None)?;
        rows.push(SensitivityRow {
            layer: setup.layer,
            lambda: spec.lambda,
            delta_pp: m.delta_pp,
            sensitivity: m.delta_pp.abs(),
            chg_pct: m.chg_pct,
            rel_perturbation: m.rel_perturbation,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub delta_pp: f64,
    /// Prediction changes in percent.
    pub drift: f64,
}

/// Scale grid `lo, lo+step, …, hi`.
pub fn scale_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as i64;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
}

pub fn scale_sweep(set: &EvalSet, model: &SurrogateModel, sae: &SaeParams, template: &InterventionSpec, scales: &[f64]) -> Result<Vec<SweepRow>> {
    scales
        .iter()
        .map(|&s| {
            let m = evaluate_run(set, model, sae, &template.with_lambda(s), None)?;
            Ok(SweepRow {
                scale: s,
                delta_pp: m.delta_pp,
                drift: m.chg_pct,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub kind: SetKind,
    pub flip_pct: f64,
    pub set_size: usize,
    pub dictionary_fraction: f64,
}

/// Prediction-change rate under `λ = 0` on `features`.
pub fn zero_ablation_fliprate(
    set: &EvalSet,
    model: &SurrogateModel,
    sae: &SaeParams,
    features: &FeatureSet,
    layer: usize,
) -> Result<FlipReport> {
    let flip_pct = if features.is_empty() {
        0.0
    } else {
        evaluate_run(set, model, sae, &InterventionSpec::new(features.clone(), 0.0, layer), None)?.chg_pct
    };
    Ok(FlipReport {
        kind: features.kind,
        flip_pct,
        set_size: features.len(),
        dictionary_fraction: features.fraction_of(sae.m),
    })
}

/// Result row with the columns of the controls and main-effect tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config: String,
    pub base: f64,
    pub delta_pp: f64,
    pub chg_pct: f64,
    pub rel_perturbation: f64,
    pub n: usize,
    pub seed: Option<u64>,
}

impl ResultRow {
    pub fn new(config: impl Into<String>, m: &EvalMetrics, seed: Option<u64>) -> Self {
        Self {
            config: config.into(),
            base: m.base_acc,
            delta_pp: m.delta_pp,
            chg_pct: m.chg_pct,
            rel_perturbation: m.rel_perturbation,
            n: m.n,
            seed,
        }
    }
}

/// The sets a control run needs.
#[derive(Debug, Clone)]
pub struct ControlSets {
    pub pattern: FeatureSet,
    pub global: FeatureSet,
    pub union: FeatureSet,
    /// Candidate pool the permutation control draws from.
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub union_lambda: f64,
    pub global_lambda: f64,
    pub rows: Vec<ResultRow>,
}

/// Pattern steering at `lambda` as reference; union and global norm-matched
/// to it; random (size-matched, union scale) and permuted (norm-matched to
/// the union run) controls for each seed.
pub fn run_controls(
    set: &EvalSet,
    model: &SurrogateModel,
    sae: &SaeParams,
    sets: &ControlSets,
    layer: usize,
    lambda: f64,
    seeds: &[u64],
    grid: &CalibrationGrid,
) -> Result<ControlReport> {
    let reference = InterventionSpec::new(sets.pattern.clone(), lambda, layer);
    let union_cal = calibrate_norm_match(set, sae, &reference, &sets.union, grid)?;
    let global_cal = calibrate_norm_match(set, sae, &reference, &sets.global, grid)?;
    let union_spec = InterventionSpec::new(sets.union.clone(), union_cal.lambda, layer);
    let mut rows = vec![
        ResultRow::new(format!("pattern@{lambda:.2}"), &evaluate_run(set, model, sae, &reference, None)?, None),
        ResultRow::new(format!("union@{:.2}", union_cal.lambda), &evaluate_run(set, model, sae, &union_spec, None)?, None),
        ResultRow::new(
            format!("global@{:.2}", global_cal.lambda),
            &evaluate_run(set, model, sae, &InterventionSpec::new(sets.global.clone(), global_cal.lambda, layer), None)?,
            None,
        ),
    ];
    let union_rel = set.relative_perturbation(sae, &union_spec);
    for &s in seeds {
        let random = circuits::random_control(sets.union.len(), sae.m, s)?;
        let m = evaluate_run(set, model, sae, &InterventionSpec::new(random, union_cal.lambda, layer), None)?;
        rows.push(ResultRow::new(format!("random@{:.2}", union_cal.lambda), &m, Some(s)));
        let permuted = circuits::permuted_control(&sets.union, &sets.pool, s)?;
        let unit = set.relative_perturbation(sae, &InterventionSpec::new(permuted.clone(), 2.0, layer));
        let lam = norm_preserving_lambda(union_cal.lambda, union_rel, unit);
        let m = evaluate_run(set, model, sae, &InterventionSpec::new(permuted, lam, layer), None)?;
        rows.push(ResultRow::new(format!("permuted@{lam:.4}"), &m, Some(s)));
    }
    Ok(ControlReport {
        union_lambda: union_cal.lambda,
        global_lambda: global_cal.lambda,
        rows,
    })
}

/// λ giving mean relative perturbation `target` for a set whose perturbation
/// at `|λ − 1| = 1` is `unit`. Stays on the same side of 1 as
/// `reference_lambda` when that side can reach the target.
pub fn norm_preserving_lambda(reference_lambda: f64, target: f64, unit: f64) -> f64 {
    if unit == 0.0 {
        return reference_lambda;
    }
    let r = target / unit;
    if reference_lambda < 1.0 && r <= 1.0 {
        1.0 - r
    } else {
        1.0 + r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapGrid {
    pub perm_seeds: Vec<u64>,
    pub subsamples: usize,
    pub n: usize,
    pub seed: u64,
}

impl Default for BootstrapGrid {
    fn default() -> Self {
        Self {
            perm_seeds: vec![0, 1, 2],
            subsamples: 5,
            n: 600,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub perm_seed: u64,
    pub subsample: usize,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub runs: Vec<BootstrapRun>,
    pub delta_pp_mean: f64,
    pub delta_pp_std: f64,
    pub chg_mean: f64,
    pub chg_std: f64,
}

/// Calls `run_fn(perm_seed, indices)` for every permutation seed and data
/// subsample; subsample draws depend only on `grid.seed` and their index.
pub fn bootstrap<F>(split_len: usize, grid: &BootstrapGrid, run_fn: F) -> Result<BootstrapReport>
where
    F: Fn(u64, &[usize]) -> Result<EvalMetrics> + Sync,
{
    let subs = (0..grid.subsamples)
        .map(|i| subsample_indices(split_len, grid.n, seed::derive(grid.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(u64, usize)> = grid
        .perm_seeds
        .iter()
        .flat_map(|&p| (0..grid.subsamples).map(move |i| (p, i)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(p, i)| {
            Ok(BootstrapRun {
                perm_seed: p,
                subsample: i,
                metrics: run_fn(p, &subs[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dpp: Vec<f64> = runs.iter().map(|r| r.metrics.delta_pp).collect();
    let chg: Vec<f64> = runs.iter().map(|r| r.metrics.chg_pct).collect();
    let (delta_pp_mean, delta_pp_std) = mean_std(&dpp);
    let (chg_mean, chg_std) = mean_std(&chg);
    Ok(BootstrapReport {
        runs,
        delta_pp_mean,
        delta_pp_std,
        chg_mean,
        chg_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub n: usize,
    pub delta_pp_mean: f64,
    pub delta_pp_std: f64,
    pub chg_mean: f64,
    pub chg_std: f64,
}

/// Repeats the bootstrap for each subsample size.
pub fn subsample_sweep<F>(split_len: usize, grid: &BootstrapGrid, sizes: &[usize], run_fn: F) -> Result<Vec<SubsampleRow>>
where
    F: Fn(u64, &[usize]) -> Result<EvalMetrics> + Sync,
{
    sizes
        .iter()
        .map(|&n| {
            let g = BootstrapGrid { n, ..grid.clone() };
            let r = bootstrap(split_len, &g, &run_fn)?;
            Ok(SubsampleRow {
                n,
                delta_pp_mean: r.delta_pp_mean,
                delta_pp_std: r.delta_pp_std,
                chg_mean: r.chg_mean,
                chg_std: r.chg_std,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn tiny_sae() -> SaeParams {
        // Identity-like dictionary on d = 2, m = 2, k = 2.
        let mut rng = seed::rng(0, 0);
        let mut p = SaeParams::init(2, 2, 2, &[0.0, 0.0], &mut rng).unwrap();
        p.w_enc = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        p.dict = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        p
    }

    #[test]
    fn single_feature_ablation() {
        let sae = tiny_sae();
        let mask = TokenRoleMask::new(2, (1, 1)).unwrap();
        let state = vec![3.0, 1.0, 5.0, 7.0];
        let spec = InterventionSpec::new(FeatureSet::new(SetKind::Pattern, [0], "t", None), 0.0, 0);
        let out = apply_intervention(&state, &mask, &sae, &spec).unwrap();
        assert_eq!(out.state, vec![0.0, 1.0, 5.0, 7.0]);
        assert!((out.delta_norms[0] - 3.0).abs() < 1e-12);
        assert_eq!(out.delta_norms[1], 0.0);
    }

    #[test]
    fn constant_bootstrap_has_zero_spread() {
        let m = EvalMetrics {
            base_acc: 0.5,
            acc: 0.6,
            delta_pp: 10.0,
            chg_pct: 20.0,
            rel_perturbation: 0.1,
            n: 600,
        };
        let r = bootstrap(1000, &BootstrapGrid::default(), |_, _| Ok(m)).unwrap();
        assert_eq!(r.runs.len(), 15);
        assert_eq!(r.delta_pp_std, 0.0);
        assert_eq!(r.chg_std, 0.0);
        assert!(bootstrap(500, &BootstrapGrid::default(), |_, _| Ok(m)).is_err());
    }

    #[test]
    fn grid_shapes() {
        let g = CalibrationGrid::default();
        assert_eq!(g.coarse().len(), 20);
        assert_eq!(g.fine(0.1).first().copied(), Some(0.0));
        assert_eq!(scale_grid(0.2, 2.0, 0.2).len(), 10);
        assert_eq!(grid_argmin(&[(0.5, 0.1), (1.5, 0.1), (1.0, 0.2)]), Some((0.5, 0.1)));
    }
}
