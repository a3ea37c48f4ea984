// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration. Every section rejects unknown keys and falls
//! back to the desk-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{PoolScope, SurrogateConfig};
use crate::circuits::{SelectionRule, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::intervention::{BootstrapGrid, CalibrationGrid, Site};
use crate::probing::ProbeHyper;
use crate::sae::SaeTrainConfig;
use crate::seed;
use crate::svr::{GeneratorConfig, TaskType, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub surrogate: SurrogateConfig,
    pub extract: ExtractSection,
    pub probe: ProbeSection,
    pub sae: SaeSection,
    pub selection: SelectionSection,
    pub intervention: InterventionSection,
    pub geometry: GeometrySection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Vocabulary JSON; the bundled vocabulary when absent.
    pub vocab: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            vocab: None,
            train: 6000,
            val: 1500,
            test: 1500,
        }
    }
}

/// How many records of each split go through the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            train: 1500,
            val: 600,
            test: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub seeds: usize,
    pub pooling: PoolScope,
    pub hyper: ProbeHyper,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            seeds: 5,
            pooling: PoolScope::All,
            hyper: ProbeHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    /// Layer of the main dictionary; the planted layer when absent.
    pub layer: Option<usize>,
    /// Extra layers that get their own dictionary for the sensitivity profile.
    pub extra_layers: Vec<usize>,
    pub max_vectors: usize,
    pub train: SaeTrainConfig,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            layer: None,
            extra_layers: vec![3, 4, 6],
            max_vectors: 20_000,
            train: SaeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub rule: SelectionRule,
    pub eps: f64,
    pub pattern_task: TaskType,
    pub global_task: TaskType,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            rule: SelectionRule::default(),
            eps: DEFAULT_EPS,
            pattern_task: TaskType::Pattern,
            global_task: TaskType::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterventionSection {
    pub steer_lambda: f64,
    pub site: Site,
    pub calibration: CalibrationGrid,
    /// Scale sweep `[lo, hi]` with step.
    pub sweep: (f64, f64, f64),
    pub control_seeds: Vec<u64>,
    pub bootstrap: BootstrapGrid,
    pub subsample_sizes: Vec<usize>,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self {
            steer_lambda: 2.0,
            site: Site::PostMlp,
            calibration: CalibrationGrid::default(),
            sweep: (0.2, 2.0, 0.2),
            control_seeds: vec![0, 1, 2],
            bootstrap: BootstrapGrid::default(),
            subsample_sizes: vec![200, 400, 600, 800, 1000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub ln_sweep: Vec<f64>,
    pub entropy_norms: Vec<f64>,
    pub curvature_alphas: Vec<f64>,
    pub collapse_nsr: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            ln_sweep: vec![1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1],
            entropy_norms: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            curvature_alphas: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            collapse_nsr: crate::geometry::COLLAPSE_NSR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Examples whose top pattern-feature maps are drawn.
    pub heatmaps: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            heatmaps: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        self.sae.train.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.dataset;
        let x = &self.extract;
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return bad("split sizes must be positive".into());
        }
        if x.train > d.train || x.val > d.val || x.test > d.test || x.train == 0 || x.val == 0 || x.test == 0 {
            return bad("extract counts must be positive and within the split sizes".into());
        }
        let l = self.sae_layer();
        if l >= self.surrogate.n_layers || self.sae.extra_layers.iter().any(|&e| e >= self.surrogate.n_layers) {
            return bad(format!("SAE layers must be below {}", self.surrogate.n_layers));
        }
        if self.probe.seeds == 0 {
            return bad("probe needs at least one seed".into());
        }
        if self.selection.pattern_task == self.selection.global_task {
            return bad("pattern and global contrasts must use different tasks".into());
        }
        let iv = &self.intervention;
        if !(iv.steer_lambda >= 0.0) || !(iv.sweep.2 > 0.0) || iv.sweep.0 > iv.sweep.1 {
            return bad("intervention scales out of range".into());
        }
        if iv.bootstrap.n > x.test || iv.subsample_sizes.iter().any(|&n| n > x.test) {
            return bad(format!("bootstrap subsamples exceed the {} extracted test records", x.test));
        }
        if !(self.selection.eps > 0.0) {
            return bad("selectivity ε must be positive".into());
        }
        Ok(())
    }

    pub fn sae_layer(&self) -> usize {
        self.sae.layer.unwrap_or(self.surrogate.plant_layer)
    }

    /// All layers that get a dictionary, main layer first.
    pub fn sae_layers(&self) -> Vec<usize> {
        let main = self.sae_layer();
        let mut v = vec![main];
        v.extend(self.sae.extra_layers.iter().copied().filter(|&l| l != main));
        v
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.dataset.vocab {
            Some(p) => Vocabulary::load(p),
            None => Ok(Vocabulary::default()),
        }
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        Ok(GeneratorConfig {
            vocab: self.vocabulary()?,
            ..GeneratorConfig::default()
        })
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            master: s,
            train: seed::derive_str(s, "dataset/train"),
            val: seed::derive_str(s, "dataset/val"),
            test: seed::derive_str(s, "dataset/test"),
            surrogate: seed::derive_str(s, "surrogate"),
            sae: seed::derive_str(s, "sae"),
            probe: (0..self.probe.seeds as u64).map(|i| seed::derive(seed::derive_str(s, "probe"), i)).collect(),
            controls: self.intervention.control_seeds.iter().map(|&c| seed::derive(seed::derive_str(s, "controls"), c)).collect(),
            bootstrap: seed::derive(seed::derive_str(s, "bootstrap"), self.intervention.bootstrap.seed),
            geometry: seed::derive_str(s, "geometry"),
        }
    }

    /// Surrogate settings with the derived seed applied.
    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            seed: self.seeds().surrogate,
            ..self.surrogate.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub train: u64,
    pub val: u64,
    pub test: u64,
    pub surrogate: u64,
    pub sae: u64,
    pub probe: Vec<u64>,
    pub controls: Vec<u64>,
    pub bootstrap: u64,
    pub geometry: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\n[sae]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
        let c = ExperimentConfig::from_toml("seed = 7\n[dataset]\ntrain = 3000\n").unwrap();
        assert_eq!((c.seed, c.dataset.train, c.dataset.val), (7, 3000, 1500));
    }

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
