// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoder.
//!
//! `z = TopK_k(ReLU(W_enc h + b_enc))`, `ĥ = D z + b_dec`, trained with Adam
//! on `‖h − ĥ‖²` under a unit-norm constraint on every dictionary column.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAE1";

/// Keeps the `k` largest entries of `v` and zeroes the rest. Ties go to the
/// lower index.
pub fn topk(v: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in topk_indices(v, k) {
        out[i] = v[i];
    }
    out
}

/// Indices of the `k` largest entries, in ascending index order.
pub fn topk_indices(v: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = |a: &usize, b: &usize| v[*b].total_cmp(&v[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Sparse code: active feature ids (ascending) and their values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self, m: usize) -> Vec<f64> {
        let mut z = vec![0.0; m];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            z[i] = v;
        }
        z
    }

    pub fn get(&self, j: usize) -> f64 {
        self.indices.binary_search(&j).map_or(0.0, |p| self.values[p])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    /// `m × d`.
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    /// Dictionary stored by rows: row `j` is the column `f_j` of `D`.
    pub dict: Matrix,
    pub b_dec: Vec<f64>,
    /// Subtract `b_dec` from inputs before encoding.
    pub pre_bias: bool,
}

impl SaeParams {
    /// Column-normalized Gaussian dictionary, `W_enc = Dᵀ`, zero encoder
    /// bias, `b_dec` set to `data_mean`.
    pub fn init<R: Rng + ?Sized>(d: usize, m: usize, k: usize, data_mean: &[f64], rng: &mut R) -> Result<Self> {
        if k > m || m < d || d == 0 {
            return Err(Error::Invalid(format!("need d ≤ m and k ≤ m, got d={d} m={m} k={k}")));
        }
        if data_mean.len() != d {
            return Err(Error::Shape(format!("b_dec has {} entries for d={d}", data_mean.len())));
        }
        let mut dict = Matrix::gaussian(m, d, 1.0, rng);
        normalize_rows(&mut dict);
        Ok(Self {
            d,
            m,
            k,
            w_enc: dict.clone(),
            b_enc: vec![0.0; m],
            dict,
            b_dec: data_mean.to_vec(),
            pre_bias: false,
        })
    }

    /// Dictionary direction `f_j`.
    pub fn feature(&self, j: usize) -> &[f64] {
        self.dict.row(j)
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.d {
            return Err(Error::Shape(format!("SAE input has {} entries, expected {}", h.len(), self.d)));
        }
        Ok(())
    }

    /// `ReLU(W_enc h + b_enc)` before the TopK cut.
    pub fn pre_activations(&self, h: &[f64]) -> Vec<f64> {
        let mut pre = vec![0.0; self.m];
        if self.pre_bias {
            let x: Vec<f64> = h.iter().zip(&self.b_dec).map(|(a, b)| a - b).collect();
            self.w_enc.matvec_into(&x, &mut pre);
        } else {
            self.w_enc.matvec_into(h, &mut pre);
        }
        for (p, b) in pre.iter_mut().zip(&self.b_enc) {
            *p = (*p + b).max(0.0);
        }
        pre
    }

    pub fn encode_sparse(&self, h: &[f64]) -> Result<SparseCode> {
        self.check_input(h)?;
        let pre = self.pre_activations(h);
        let mut code = SparseCode::default();
        for i in topk_indices(&pre, self.k) {
            if pre[i] > 0.0 {
                code.indices.push(i);
                code.values.push(pre[i]);
            }
        }
        Ok(code)
    }

    /// Dense code of length `m`.
    pub fn encode(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_sparse(h)?.to_dense(self.m))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.m {
            return Err(Error::Shape(format!("code has {} entries, expected {}", z.len(), self.m)));
        }
        let mut out = self.b_dec.clone();
        for (j, &v) in z.iter().enumerate() {
            if v != 0.0 {
                axpy(v, self.dict.row(j), &mut out);
            }
        }
        Ok(out)
    }

    pub fn decode_sparse(&self, code: &SparseCode) -> Vec<f64> {
        let mut out = self.b_dec.clone();
        for (&j, &v) in code.indices.iter().zip(&code.values) {
            axpy(v, self.dict.row(j), &mut out);
        }
        out
    }

    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_sparse(&self.encode_sparse(h)?))
    }

    /// Largest deviation of a dictionary column norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        self.dict.iter_rows().map(|r| (norm(r) - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.is_finite()
            && self.dict.is_finite()
            && self.b_enc.iter().chain(&self.b_dec).all(|v| v.is_finite())
    }

    /// Writes the f32 checkpoint. The format has no pre-bias flag, so a
    /// pre-bias is folded into `b_enc` (`b_enc − W_enc·b_dec`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let b_enc = if self.pre_bias {
            let shift = self.w_enc.matvec(&self.b_dec);
            self.b_enc.iter().zip(&shift).map(|(b, s)| b - s).collect()
        } else {
            self.b_enc.clone()
        };
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let mut buf = Vec::with_capacity(16 + 4 * (2 * self.m * self.d + self.m + self.d));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [self.d, self.m, self.k] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let dt = self.dict.transpose();
        for v in self
            .w_enc
            .as_slice()
            .iter()
            .chain(&b_enc)
            .chain(dt.as_slice())
            .chain(&self.b_dec)
        {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "not an SAE1 checkpoint".into(),
            });
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (d, m, k) = (u(0), u(1), u(2));
        let need = 16 + 4 * (2 * m * d + m + d);
        if bytes.len() != need {
            return Err(Error::Format {
                offset: bytes.len().min(need) as u64,
                reason: format!("checkpoint holds {} bytes, header implies {need}", bytes.len()),
            });
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let (w_enc, rest) = vals.split_at(m * d);
        let (b_enc, rest) = rest.split_at(m);
        let (dt, b_dec) = rest.split_at(d * m);
        Ok(Self {
            d,
            m,
            k,
            w_enc: Matrix::from_vec(m, d, w_enc.to_vec()),
            b_enc: b_enc.to_vec(),
            dict: Matrix::from_vec(d, m, dt.to_vec()).transpose(),
            b_dec: b_dec.to_vec(),
            pre_bias: false,
        })
    }
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    /// Dictionary size is `expansion · d`.
    pub expansion: usize,
    pub k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps without activity after which a feature counts as dead.
    pub dead_window: usize,
    /// Reinitialize features that stayed dead for a full window.
    pub resample_dead: bool,
    pub pre_bias: bool,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            expansion: 8,
            k: 8,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            steps: 2000,
            dead_window: 500,
            resample_dead: false,
            pre_bias: false,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion == 0 || self.batch_size == 0 || self.steps == 0 || self.dead_window == 0 {
            return Err(Error::Invalid("SAE sizes and step counts must be positive".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Invalid("SAE optimizer settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean squared reconstruction error of each step's batch.
    pub losses: Vec<f64>,
    /// Full-data loss before the first step.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Features with no activation in the last `dead_window` steps.
    pub dead_features: usize,
    /// `E[‖h − ĥ‖ / ‖h‖]` over the training data after the last step.
    pub final_rel_error: f64,
}

/// Gradients of the batch loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    /// Same layout as `SaeParams::dict` (row `j` is `∂/∂f_j`).
    pub dict: Vec<f64>,
    pub b_dec: Vec<f64>,
}

/// Mean over `batch` of `‖h − ĥ‖²` and its gradient. The TopK support is
/// treated as fixed, which is exact almost everywhere.
pub fn loss_and_grad(p: &SaeParams, batch: &[&[f64]]) -> Result<(f64, Grads)> {
    let (d, m) = (p.d, p.m);
    let mut g = Grads {
        w_enc: vec![0.0; m * d],
        b_enc: vec![0.0; m],
        dict: vec![0.0; m * d],
        b_dec: vec![0.0; d],
    };
    let scale = 2.0 / batch.len() as f64;
    let mut loss = 0.0;
    for h in batch {
        let code = p.encode_sparse(h)?;
        let recon = p.decode_sparse(&code);
        let r: Vec<f64> = recon.iter().zip(h.iter()).map(|(a, b)| a - b).collect();
        loss += dot(&r, &r);
        axpy(scale, &r, &mut g.b_dec);
        let x: Vec<f64> = if p.pre_bias {
            h.iter().zip(&p.b_dec).map(|(a, b)| a - b).collect()
        } else {
            h.to_vec()
        };
        for (&j, &zj) in code.indices.iter().zip(&code.values) {
            axpy(scale * zj, &r, &mut g.dict[j * d..(j + 1) * d]);
            let dz = scale * dot(p.dict.row(j), &r);
            axpy(dz, &x, &mut g.w_enc[j * d..(j + 1) * d]);
            g.b_enc[j] += dz;
            if p.pre_bias {
                axpy(-dz, p.w_enc.row(j), &mut g.b_dec);
            }
        }
    }
    Ok((loss / batch.len() as f64, g))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &SaeTrainConfig, t: usize) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= cfg.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
        }
    }

    fn reset_row(&mut self, row: usize, width: usize) {
        self.m[row * width..(row + 1) * width].fill(0.0);
        self.v[row * width..(row + 1) * width].fill(0.0);
    }
}

/// Mean squared reconstruction error over `data`.
pub fn mean_loss(p: &SaeParams, data: &Matrix) -> Result<f64> {
    let mut s = 0.0;
    for h in data.iter_rows() {
        let r = p.reconstruct(h)?;
        s += r.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s / data.rows().max(1) as f64)
}

/// `E[‖h − ĥ‖ / ‖h‖]` over rows with non-zero norm.
pub fn mean_relative_error(p: &SaeParams, data: &Matrix) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for h in data.iter_rows() {
        let hn = norm(h);
        if hn > 0.0 {
            let r = p.reconstruct(h)?;
            s += norm(&r.iter().zip(h).map(|(a, b)| a - b).collect::<Vec<_>>()) / hn;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn train_sae(data: &Matrix, cfg: &SaeTrainConfig) -> Result<(SaeParams, TrainStats)> {
    train_sae_with(data, cfg, |_, _| {})
}

/// Trains an SAE on the rows of `data`; `on_step(step, params)` sees the
/// parameters after every update.
pub fn train_sae_with<F: FnMut(usize, &SaeParams)>(
    data: &Matrix,
    cfg: &SaeTrainConfig,
    mut on_step: F,
) -> Result<(SaeParams, TrainStats)> {
    cfg.validate()?;
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return Err(Error::Invalid("no training vectors for the SAE".into()));
    }
    let m = cfg.expansion * d;
    let mut rng = seed::rng_str(cfg.seed, "sae");
    let mut mean = vec![0.0; d];
    for h in data.iter_rows() {
        axpy(1.0 / n as f64, h, &mut mean);
    }
    let mut p = SaeParams::init(d, m, cfg.k, &mean, &mut rng)?;
    p.pre_bias = cfg.pre_bias;

    let initial_loss = mean_loss(&p, data)?;
    let mut opt = [Adam::new(m * d), Adam::new(m), Adam::new(m * d), Adam::new(d)];
    let mut last_active = vec![0usize; m];
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut batch: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data.row(order[cursor]));
            cursor += 1;
        }
        let (loss, mut g) = loss_and_grad(&p, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("SAE loss at step {step}")));
        }
        losses.push(loss);
        for h in &batch {
            for j in p.encode_sparse(h)?.indices {
                last_active[j] = step;
            }
        }
        // Drop the gradient component that would change column norms.
        for j in 0..m {
            let f = p.dict.row(j);
            let gj = &mut g.dict[j * d..(j + 1) * d];
            let along = dot(gj, f);
            axpy(-along, f, gj);
        }
        opt[0].step(p.w_enc.as_mut_slice(), &g.w_enc, cfg, step);
        opt[1].step(&mut p.b_enc, &g.b_enc, cfg, step);
        opt[2].step(p.dict.as_mut_slice(), &g.dict, cfg, step);
        opt[3].step(&mut p.b_dec, &g.b_dec, cfg, step);
        normalize_rows(&mut p.dict);

        if cfg.resample_dead && step % cfg.dead_window == 0 {
            for j in 0..m {
                if step - last_active[j] >= cfg.dead_window {
                    let h = batch[rng.gen_range(0..batch.len())];
                    let r = p.reconstruct(h)?;
                    let mut dir: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a - b).collect();
                    let nr = norm(&dir);
                    if nr > 1e-12 {
                        dir.iter_mut().for_each(|v| *v /= nr);
                        p.dict.row_mut(j).copy_from_slice(&dir);
                        for (w, f) in p.w_enc.row_mut(j).iter_mut().zip(&dir) {
                            *w = 0.2 * f;
                        }
                        p.b_enc[j] = 0.0;
                        opt[0].reset_row(j, d);
                        opt[1].reset_row(j, 1);
                        opt[2].reset_row(j, d);
                        last_active[j] = step;
                    }
                }
            }
        }
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("SAE parameters at step {step}")));
        }
        on_step(step, &p);
    }
    let dead = last_active
        .iter()
        .filter(|&&s| cfg.steps.saturating_sub(s) >= cfg.dead_window.min(cfg.steps))
        .count();
    let stats = TrainStats {
        losses,
        initial_loss,
        final_loss: mean_loss(&p, data)?,
        dead_features: dead,
        final_rel_error: mean_relative_error(&p, data)?,
    };
    Ok((p, stats))
}
