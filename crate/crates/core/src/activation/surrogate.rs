// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded surrogate network.
//!
//! A pre-norm residual stack `h ← h + MLP_l(LN_l(h))` over `T` tokens, the
//! first `H·W` of which are image tokens. Token inputs are sparse
//! superpositions of random atoms plus a weak embedding of the object in
//! the token's grid cell. Block `plant_layer` adds `a·(U[task] + ω·E[answer])`
//! to every image token. The next block is a gated MLP whose unit
//! `(τ, c)` computes `silu(κ(⟨U_τ, x⟩ − θ)) · ⟨E_c, x⟩` and writes it onto
//! the readout direction `R_c`; option logits read `R_c` off the
//! mean-pooled final state. Text tokens carry a small prior toward option A.
//!
//! Recorded state `l` is the output of block `l`. MLPs act per token, so
//! the tail of the network can be re-run for a single token, which is what
//! interventions use.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, random_orthonormal, Matrix};
use crate::seed;
use crate::svr::{Difficulty, QAExample, Size, TaskType, Vocabulary};

use super::{ActivationRecord, TokenRoleMask};

/// Number of task directions.
pub const N_TASKS: usize = 7;
/// Evidence and readout channels: the largest option count (0..=12).
pub const N_CHANNELS: usize = 13;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub seed: u64,
    pub n_layers: usize,
    pub width: usize,
    pub n_tokens: usize,
    /// Image patch grid `(H, W)`.
    pub grid: (usize, usize),
    pub mlp_width: usize,
    pub plant_layer: usize,
    /// Plant amplitude per difficulty `[easy, medium, hard]`.
    pub amplitudes: [f64; 3],
    /// Answer-evidence amplitude relative to the task amplitude.
    pub evidence_ratio: f64,
    /// Size of the random atom dictionary token noise is drawn from.
    pub noise_atoms: usize,
    pub atoms_per_token: usize,
    /// Per-coordinate standard deviation of token noise.
    pub noise_std: f64,
    /// Norm of the shape and color embeddings added to occupied cells.
    pub content_scale: f64,
    /// Amplitude of the text-token prior toward option A.
    pub prior_scale: f64,
    /// Output scale of the generic random MLP blocks.
    pub block_gain: f64,
    /// Gate slope κ.
    pub gate_gain: f64,
    /// Gate threshold θ on the task projection.
    pub gate_threshold: f64,
    /// Output scale of the gated readout units.
    pub readout_gain: f64,
    /// Std of fresh task-subspace noise added by blocks after the plant.
    pub post_plant_noise: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_layers: 8,
            width: 64,
            n_tokens: 48,
            grid: (4, 4),
            mlp_width: 128,
            plant_layer: 5,
            amplitudes: [3.0, 2.0, 1.2],
            evidence_ratio: 0.4,
            noise_atoms: 96,
            atoms_per_token: 3,
            noise_std: 0.8,
            content_scale: 1.0,
            prior_scale: 0.3,
            block_gain: 0.1,
            gate_gain: 4.0,
            gate_threshold: 0.6,
            readout_gain: 1.0,
            post_plant_noise: 0.5,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_layers < 2 || self.plant_layer + 1 >= self.n_layers {
            return bad(format!(
                "plant layer {} needs a following block within {} layers",
                self.plant_layer, self.n_layers
            ));
        }
        if self.width < N_TASKS + 2 * N_CHANNELS {
            return bad(format!("width {} cannot hold {} orthonormal directions", self.width, N_TASKS + 2 * N_CHANNELS));
        }
        if self.mlp_width < N_TASKS * N_CHANNELS {
            return bad(format!("mlp width {} < {} gated units", self.mlp_width, N_TASKS * N_CHANNELS));
        }
        if self.grid.0 * self.grid.1 > self.n_tokens || self.grid.0 * self.grid.1 == 0 {
            return bad(format!("grid {:?} does not fit {} tokens", self.grid, self.n_tokens));
        }
        if self.atoms_per_token > self.noise_atoms {
            return bad("more atoms per token than atoms".into());
        }
        let nums = [
            self.noise_std,
            self.content_scale,
            self.prior_scale,
            self.block_gain,
            self.gate_gain,
            self.readout_gain,
            self.post_plant_noise,
            self.evidence_ratio,
        ];
        if nums.iter().chain(&self.amplitudes).any(|v| !v.is_finite() || *v < 0.0) {
            return bad("surrogate scales must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn mask(&self) -> TokenRoleMask {
        TokenRoleMask {
            n_tokens: self.n_tokens,
            grid: self.grid,
        }
    }

    pub fn amplitude(&self, d: Difficulty) -> f64 {
        self.amplitudes[d.index()]
    }
}

/// Content of one occupied grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellContent {
    pub shape: usize,
    pub color: usize,
    pub large: bool,
}

/// What the surrogate sees of an example.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateInput {
    pub id: String,
    pub task: TaskType,
    pub difficulty: Difficulty,
    /// Zero-based gold option.
    pub answer: usize,
    pub n_options: usize,
    /// Row-major over the scene grid.
    pub cells: Vec<Option<CellContent>>,
}

impl SurrogateInput {
    pub fn from_example(ex: &QAExample, vocab: &Vocabulary) -> Result<Self> {
        let answer = ex
            .answer_index()
            .ok_or_else(|| Error::metadata("answer", format!("`{}` is not an option letter", ex.answer)))?;
        if ex.options.is_empty() || ex.options.len() > N_CHANNELS || answer >= ex.options.len() {
            return Err(Error::metadata("options", format!("{} options, answer {answer}", ex.options.len())));
        }
        let g = usize::from(crate::svr::scene::GRID);
        let mut cells = vec![None; g * g];
        for o in &ex.metadata.scene.objects {
            let shape = vocab
                .shape_index(&o.shape)
                .ok_or_else(|| Error::metadata("scene.objects.shape", o.shape.clone()))?;
            let color = vocab
                .color_index(&o.color)
                .ok_or_else(|| Error::metadata("scene.objects.color", o.color.clone()))?;
            cells[usize::from(o.cell.1) * g + usize::from(o.cell.0)] = Some(CellContent {
                shape,
                color,
                large: o.size == Size::Large,
            });
        }
        Ok(Self {
            id: ex.id.clone(),
            task: ex.task_type,
            difficulty: ex.difficulty,
            answer,
            n_options: ex.options.len(),
            cells,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    w_gate: Matrix,
    b_gate: Vec<f64>,
    w_up: Matrix,
    w_down: Matrix,
}

impl Block {
    fn random<R: Rng + ?Sized>(d: usize, h: usize, gain: f64, rng: &mut R) -> Self {
        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        Self {
            gamma: (0..d).map(|_| 1.0 + 0.1 * normal(rng)).collect(),
            beta: vec![0.0; d],
            w_gate: Matrix::gaussian(h, d, 1.0 / (d as f64).sqrt(), rng),
            b_gate: vec![0.0; h],
            w_up: Matrix::gaussian(h, d, 1.0 / (d as f64).sqrt(), rng),
            w_down: Matrix::gaussian(d, h, gain / (h as f64).sqrt(), rng),
        }
    }

    /// `LN(h)` with this block's gain and bias.
    fn layer_norm(&self, h: &[f64]) -> Vec<f64> {
        let n = h.len() as f64;
        let mu = h.iter().sum::<f64>() / n;
        let var = h.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        h.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| g * (v - mu) * inv + b)
            .collect()
    }

    /// Residual update `MLP(LN(h))`, accumulated into `out`.
    fn update_into(&self, h: &[f64], out: &mut [f64]) {
        let x = self.layer_norm(h);
        let hidden = self.w_gate.rows();
        let mut act = vec![0.0; hidden];
        for (j, a) in act.iter_mut().enumerate() {
            let g = dot(self.w_gate.row(j), &x) + self.b_gate[j];
            let u = dot(self.w_up.row(j), &x);
            if u != 0.0 {
                *a = silu(g) * u;
            }
        }
        for (o, row) in out.iter_mut().zip(self.w_down.iter_rows()) {
            *o += dot(row, &act);
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Per-example inputs that do not depend on the residual state.
#[derive(Debug, Clone)]
pub struct ExampleContext {
    pub input: SurrogateInput,
    /// `T × d` token embeddings fed to block 0.
    pub embedding: Vec<f64>,
    /// Vector added to every image token by the plant block.
    pub plant: Vec<f64>,
    /// Per-layer additive `T × d` noise (empty when the block adds none).
    pub block_noise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    config: SurrogateConfig,
    blocks: Vec<Block>,
    task_dirs: Matrix,
    evidence_dirs: Matrix,
    readout_dirs: Matrix,
    atoms: Matrix,
    shape_emb: Matrix,
    color_emb: Matrix,
}

impl SurrogateModel {
    pub fn new(config: SurrogateConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut rng = seed::rng_str(config.seed, "surrogate");
        let basis = random_orthonormal(N_TASKS + 2 * N_CHANNELS, d, &mut rng);
        let pick = |range: std::ops::Range<usize>| Matrix::from_rows(&range.map(|i| basis.row(i).to_vec()).collect::<Vec<_>>());
        let task_dirs = pick(0..N_TASKS);
        let evidence_dirs = pick(N_TASKS..N_TASKS + N_CHANNELS);
        let readout_dirs = pick(N_TASKS + N_CHANNELS..N_TASKS + 2 * N_CHANNELS);
        let atoms = unit_rows(Matrix::gaussian(config.noise_atoms, d, 1.0, &mut rng));
        let shape_emb = unit_rows(Matrix::gaussian(crate::svr::vocab::SHAPE_COUNT, d, 1.0, &mut rng));
        let color_emb = unit_rows(Matrix::gaussian(crate::svr::vocab::PALETTE_SIZE, d, 1.0, &mut rng));

        let h = config.mlp_width;
        let gate_layer = config.plant_layer + 1;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut b = Block::random(d, h, config.block_gain, &mut rng);
            if l == gate_layer {
                b = gated_block(&config, &task_dirs, &evidence_dirs, &readout_dirs);
            }
            blocks.push(b);
        }
        Ok(Self {
            config,
            blocks,
            task_dirs,
            evidence_dirs,
            readout_dirs,
            atoms,
            shape_emb,
            color_emb,
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_tokens(&self) -> usize {
        self.config.n_tokens
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn mask(&self) -> TokenRoleMask {
        self.config.mask()
    }

    /// Rows are the orthonormal task directions `U`.
    pub fn task_directions(&self) -> &Matrix {
        &self.task_dirs
    }

    pub fn evidence_directions(&self) -> &Matrix {
        &self.evidence_dirs
    }

    pub fn readout_directions(&self) -> &Matrix {
        &self.readout_dirs
    }

    pub fn context(&self, input: &SurrogateInput) -> Result<ExampleContext> {
        let c = &self.config;
        let (t_all, d) = (c.n_tokens, c.width);
        if input.n_options == 0 || input.n_options > N_CHANNELS || input.answer >= input.n_options {
            return Err(Error::Invalid(format!("example `{}` has bad option layout", input.id)));
        }
        let ex_seed = seed::derive_str(c.seed, &format!("example/{}", input.id));
        let mut rng = seed::rng_str(ex_seed, "embedding");
        let mask = self.mask();
        let coef = c.noise_std * (d as f64 / c.atoms_per_token.max(1) as f64).sqrt();
        let mut embedding = vec![0.0; t_all * d];
        for t in 0..t_all {
            let row = &mut embedding[t * d..(t + 1) * d];
            for a in sample(&mut rng, c.noise_atoms, c.atoms_per_token) {
                let z: f64 = StandardNormal.sample(&mut rng);
                axpy(coef * z, self.atoms.row(a), row);
            }
            if mask.is_image(t) {
                if let Some(Some(cell)) = input.cells.get(grid_cell(t, c.grid)) {
                    let s = c.content_scale * if cell.large { 1.0 } else { 0.6 };
                    axpy(s, self.shape_emb.row(cell.shape), row);
                    axpy(s, self.color_emb.row(cell.color), row);
                }
            } else {
                axpy(c.prior_scale, self.readout_dirs.row(0), row);
            }
        }

        let a = c.amplitude(input.difficulty);
        let mut plant = vec![0.0; d];
        axpy(a, self.task_dirs.row(input.task.index()), &mut plant);
        axpy(a * c.evidence_ratio, self.evidence_dirs.row(input.answer), &mut plant);

        let mut noise_rng = seed::rng_str(ex_seed, "block-noise");
        let block_noise = (0..c.n_layers)
            .map(|l| {
                if l <= c.plant_layer || c.post_plant_noise == 0.0 {
                    return Vec::new();
                }
                let mut v = vec![0.0; t_all * d];
                for t in 0..t_all {
                    for k in 0..N_TASKS {
                        let z: f64 = StandardNormal.sample(&mut noise_rng);
                        axpy(c.post_plant_noise * z, self.task_dirs.row(k), &mut v[t * d..(t + 1) * d]);
                    }
                }
                v
            })
            .collect();
        Ok(ExampleContext {
            input: input.clone(),
            embedding,
            plant,
            block_noise,
        })
    }

    /// Block `l` applied to one token, including context terms.
    fn step_token(&self, ctx: &ExampleContext, l: usize, t: usize, h: &mut [f64]) {
        let d = self.config.width;
        let mut delta = vec![0.0; d];
        self.blocks[l].update_into(h, &mut delta);
        for (x, dx) in h.iter_mut().zip(&delta) {
            *x += dx;
        }
        if l == self.config.plant_layer && self.mask().is_image(t) {
            axpy(1.0, &ctx.plant, h);
        }
        if let Some(noise) = ctx.block_noise.get(l).filter(|n| !n.is_empty()) {
            axpy(1.0, &noise[t * d..(t + 1) * d], h);
        }
    }

    /// The bare block map `h ↦ h + MLP_l(LN_l(h))` without context terms.
    pub fn block_map(&self, l: usize, h: &[f64]) -> Vec<f64> {
        let mut out = h.to_vec();
        self.blocks[l].update_into(h, &mut out);
        out
    }

    /// Full forward pass with every layer recorded.
    pub fn forward(&self, input: &SurrogateInput) -> Result<ActivationRecord> {
        let ctx = self.context(input)?;
        self.forward_ctx(&ctx)
    }

    pub fn forward_ctx(&self, ctx: &ExampleContext) -> Result<ActivationRecord> {
        let c = &self.config;
        let (t_all, d) = (c.n_tokens, c.width);
        let mut h = ctx.embedding.clone();
        let mut states = Vec::with_capacity(c.n_layers * t_all * d);
        for l in 0..c.n_layers {
            for t in 0..t_all {
                self.step_token(ctx, l, t, &mut h[t * d..(t + 1) * d]);
            }
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("surrogate layer {l} of `{}`", ctx.input.id)));
            }
            states.extend(h.iter().map(|&v| v as f32));
        }
        let logits = self.readout(ctx, &h);
        Ok(ActivationRecord {
            id: ctx.input.id.clone(),
            label: Some(b'A' + ctx.input.answer as u8),
            logits: logits.iter().map(|&v| v as f32).collect(),
            mask: self.mask(),
            n_layers: c.n_layers,
            states,
        })
    }

    /// Readout channels of one token after running it from the output of
    /// block `layer` through the remaining blocks. Logits are the token
    /// mean of these vectors, truncated to the option count.
    pub fn token_tail(&self, ctx: &ExampleContext, layer: usize, t: usize, h: &[f64]) -> Vec<f64> {
        let mut x = h.to_vec();
        for l in layer + 1..self.config.n_layers {
            self.step_token(ctx, l, t, &mut x);
        }
        self.readout_dirs.matvec(&x)
    }

    /// Replaces the state after block `layer` with `state` (`T × d`) and
    /// runs the rest of the network.
    pub fn continue_from(&self, ctx: &ExampleContext, layer: usize, state: &[f64]) -> Result<Vec<f64>> {
        let (t_all, d) = (self.config.n_tokens, self.config.width);
        if layer >= self.config.n_layers || state.len() != t_all * d {
            return Err(Error::Shape(format!(
                "continue_from layer {layer} with {} values, expected {}",
                state.len(),
                t_all * d
            )));
        }
        let mut acc = vec![0.0; N_CHANNELS];
        for t in 0..t_all {
            axpy(1.0, &self.token_tail(ctx, layer, t, &state[t * d..(t + 1) * d]), &mut acc);
        }
        Ok(finish_logits(acc, t_all, ctx.input.n_options))
    }

    fn readout(&self, ctx: &ExampleContext, h: &[f64]) -> Vec<f64> {
        let (t_all, d) = (self.config.n_tokens, self.config.width);
        let mut acc = vec![0.0; N_CHANNELS];
        for t in 0..t_all {
            axpy(1.0, &self.readout_dirs.matvec(&h[t * d..(t + 1) * d]), &mut acc);
        }
        finish_logits(acc, t_all, ctx.input.n_options)
    }

    /// Forward passes for many inputs, in parallel, in input order.
    pub fn forward_batch(&self, inputs: &[SurrogateInput]) -> Result<Vec<ActivationRecord>> {
        inputs.par_iter().map(|i| self.forward(i)).collect()
    }
}

/// Mean over tokens of summed per-token readouts, restricted to the options.
pub fn finish_logits(mut acc: Vec<f64>, n_tokens: usize, n_options: usize) -> Vec<f64> {
    acc.truncate(n_options);
    acc.iter_mut().for_each(|v| *v /= n_tokens as f64);
    acc
}

fn grid_cell(t: usize, grid: (usize, usize)) -> usize {
    // Token grid and scene grid coincide at 4×4; other grids map by row and column.
    let g = usize::from(crate::svr::scene::GRID);
    let (r, c) = (t / grid.1, t % grid.1);
    if r < g && c < g {
        r * g + c
    } else {
        usize::MAX
    }
}

fn unit_rows(mut m: Matrix) -> Matrix {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = dot(row, row).sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn gated_block(config: &SurrogateConfig, u: &Matrix, e: &Matrix, r: &Matrix) -> Block {
    let (d, h) = (config.width, config.mlp_width);
    let mut w_gate = Matrix::zeros(h, d);
    let mut b_gate = vec![0.0; h];
    let mut w_up = Matrix::zeros(h, d);
    let mut w_down = Matrix::zeros(d, h);
    for tau in 0..N_TASKS {
        for c in 0..N_CHANNELS {
            let j = tau * N_CHANNELS + c;
            for k in 0..d {
                w_gate.set(j, k, config.gate_gain * u.get(tau, k));
                w_up.set(j, k, e.get(c, k));
                w_down.set(k, j, config.readout_gain * r.get(c, k));
            }
            b_gate[j] = -config.gate_gain * config.gate_threshold;
        }
    }
    Block {
        gamma: vec![1.0; d],
        beta: vec![0.0; d],
        w_gate,
        b_gate,
        w_up,
        w_down,
    }
}
