// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer token activations: record type, shard format, token pooling
//! and the seeded surrogate network that produces them.

pub mod shard;
pub mod surrogate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use shard::{read_index, read_shard, write_shard, IndexEntry, ShardHeader, ShardReader, ShardWriter};
pub use surrogate::{ExampleContext, SurrogateConfig, SurrogateInput, SurrogateModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Image,
    Text,
}

/// Image tokens are the first `H·W` positions, laid out row-major on the
/// patch grid; the remaining positions are text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRoleMask {
    pub n_tokens: usize,
    pub grid: (usize, usize),
}

impl TokenRoleMask {
    pub fn new(n_tokens: usize, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 > n_tokens {
            return Err(Error::Shape(format!(
                "image grid {}×{} does not fit in {n_tokens} tokens",
                grid.0, grid.1
            )));
        }
        Ok(Self { n_tokens, grid })
    }

    pub fn n_image(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_image(&self, t: usize) -> bool {
        t < self.n_image()
    }

    pub fn role(&self, t: usize) -> TokenRole {
        if self.is_image(t) {
            TokenRole::Image
        } else {
            TokenRole::Text
        }
    }

    pub fn image_tokens(&self) -> std::ops::Range<usize> {
        0..self.n_image()
    }

    pub fn text_tokens(&self) -> std::ops::Range<usize> {
        self.n_image()..self.n_tokens
    }
}

/// Activations of one example at every recorded layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub id: String,
    /// ASCII option letter of the gold answer, if known.
    pub label: Option<u8>,
    pub logits: Vec<f32>,
    pub mask: TokenRoleMask,
    pub n_layers: usize,
    /// `n_layers × n_tokens × width`, row-major.
    pub states: Vec<f32>,
}

impl ActivationRecord {
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_tokens(&self) -> usize {
        self.mask.n_tokens
    }

    pub fn width(&self) -> usize {
        if self.n_layers == 0 || self.mask.n_tokens == 0 {
            0
        } else {
            self.states.len() / (self.n_layers * self.mask.n_tokens)
        }
    }

    /// `T × d` block of layer `l`.
    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.n_tokens() * self.width();
        &self.states[l * n..(l + 1) * n]
    }

    pub fn token(&self, l: usize, t: usize) -> &[f32] {
        let d = self.width();
        &self.layer(l)[t * d..(t + 1) * d]
    }

    /// Layer `l` widened to `f64`.
    pub fn layer_f64(&self, l: usize) -> Vec<f64> {
        self.layer(l).iter().map(|&v| f64::from(v)).collect()
    }

    /// Zero-based index of the gold option.
    pub fn label_index(&self) -> Option<usize> {
        self.label.filter(u8::is_ascii_uppercase).map(|b| (b - b'A') as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.states.len() % (self.n_layers * self.mask.n_tokens.max(1)) != 0 {
            return Err(Error::Shape(format!("record `{}` state length {}", self.id, self.states.len())));
        }
        if let Some(i) = self.states.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record `{}` state entry {i}", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    #[default]
    All,
    ImageOnly,
}

/// Mean of the selected token rows at `layer`.
pub fn pool_tokens(record: &ActivationRecord, layer: usize, scope: PoolScope) -> Result<Vec<f64>> {
    if layer >= record.n_layers() {
        return Err(Error::Invalid(format!(
            "layer {layer} out of range for {} layers",
            record.n_layers()
        )));
    }
    let tokens = match scope {
        PoolScope::All => 0..record.n_tokens(),
        PoolScope::ImageOnly => record.mask.image_tokens(),
    };
    if tokens.is_empty() {
        return Err(Error::Invalid(format!("no tokens selected for pooling in `{}`", record.id)));
    }
    let d = record.width();
    let n = tokens.len() as f64;
    let mut out = vec![0.0; d];
    for t in tokens {
        for (o, &v) in out.iter_mut().zip(record.token(layer, t)) {
            *o += f64::from(v);
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(rows: &[[f32; 2]], grid: (usize, usize)) -> ActivationRecord {
        ActivationRecord {
            id: "r".into(),
            label: None,
            logits: vec![],
            mask: TokenRoleMask::new(rows.len(), grid).unwrap(),
            n_layers: 1,
            states: rows.iter().flatten().copied().collect(),
        }
    }

    #[test]
    fn pooling_cases() {
        let r = record(&[[1.0, 3.0], [3.0, 1.0]], (1, 1));
        assert_eq!(pool_tokens(&r, 0, PoolScope::All).unwrap(), vec![2.0, 2.0]);
        let r = record(&[[4.0, 2.0], [2.0, 6.0], [0.0, 0.0]], (1, 2));
        assert_eq!(pool_tokens(&r, 0, PoolScope::ImageOnly).unwrap(), vec![3.0, 4.0]);
        assert!(pool_tokens(&r, 1, PoolScope::All).is_err());
        let r = record(&[[1.0, 1.0]], (0, 0));
        assert!(pool_tokens(&r, 0, PoolScope::ImageOnly).is_err());
    }
}
