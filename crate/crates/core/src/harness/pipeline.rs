// SPDX-License-Identifier: MIT OR Apache-2.0

//! Staged experiment pipeline with persisted artifacts, input-hash skipping
//! and a reproducibility manifest.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::activation::{pool_tokens, ActivationRecord, ShardHeader, ShardReader, ShardWriter, SurrogateInput, SurrogateModel};
use crate::circuits::{self, FeatureSet, SetKind};
use crate::error::{Error, Result};
use crate::geometry;
use crate::intervention::{
    self, calibrate_norm_match, evaluate_run, Calibration, ControlSets, EvalMetrics, EvalSet, InterventionSpec, LayerSetup, Outcome,
    ResultRow, ScaleMode,
};
use crate::linalg::{random_orthonormal, Matrix};
use crate::probing::{layer_sweep, ProbeData};
use crate::sae::{train_sae, SaeParams};
use crate::seed;
use crate::svr::{generate_split, read_jsonl, validate_split, QAExample, SplitName};

use super::config::ExperimentConfig;
use super::report::{plot_heatmap, Schema, Table};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Gen,
    Validate,
    Extract,
    Probe,
    Sae,
    Select,
    Calibrate,
    Intervene,
    Ablate,
    Controls,
    Geometry,
    Report,
}

impl Stage {
    /// Execution order of a full run.
    pub const ALL: [Stage; 12] = [
        Stage::Gen,
        Stage::Validate,
        Stage::Extract,
        Stage::Probe,
        Stage::Sae,
        Stage::Select,
        Stage::Calibrate,
        Stage::Intervene,
        Stage::Ablate,
        Stage::Controls,
        Stage::Geometry,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Validate => "validate",
            Stage::Extract => "extract",
            Stage::Probe => "probe",
            Stage::Sae => "sae",
            Stage::Select => "select",
            Stage::Calibrate => "calibrate",
            Stage::Intervene => "intervene",
            Stage::Ablate => "ablate",
            Stage::Controls => "controls",
            Stage::Geometry => "geometry",
            Stage::Report => "report",
        }
    }

    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Validate | Stage::Extract => &[Stage::Gen],
            Stage::Probe | Stage::Sae => &[Stage::Extract],
            Stage::Select => &[Stage::Sae],
            Stage::Calibrate | Stage::Ablate | Stage::Geometry | Stage::Report => &[Stage::Select],
            Stage::Intervene | Stage::Controls => &[Stage::Calibrate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    /// Artifact path relative to the run directory → hex SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: super::config::Seeds,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Hex SHA-256 of a file, streamed.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    overwrite: bool,
    manifest: RunManifest,
    /// Digests of files hashed during this invocation.
    hashes: RefCell<HashMap<PathBuf, String>>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, overwrite: bool) -> Result<Self> {
        cfg.validate()?;
        let out = out.unwrap_or_else(|| cfg.output.dir.clone());
        let path = out.join("manifest.json");
        let stages = if path.exists() {
            RunManifest::load(&path)?.stages
        } else {
            BTreeMap::new()
        };
        let manifest = RunManifest {
            version: TOOL_VERSION.to_string(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds(),
            stages,
        };
        Ok(Self {
            cfg,
            out,
            overwrite,
            manifest,
            hashes: RefCell::default(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Runs `stages` in the given order and returns the updated manifest.
    pub fn run(&mut self, stages: &[Stage]) -> Result<RunManifest> {
        for &s in stages {
            self.run_stage(s)?;
        }
        Ok(self.manifest.clone())
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn disk_hash(&self, p: &Path) -> Result<String> {
        if let Some(h) = self.hashes.borrow().get(p) {
            return Ok(h.clone());
        }
        let h = file_sha256(p)?;
        self.hashes.borrow_mut().insert(p.to_path_buf(), h.clone());
        Ok(h)
    }

    /// Current digests of a stage's recorded outputs.
    fn disk_hashes(&self, rec: &StageRecord) -> Result<BTreeMap<String, String>> {
        rec.outputs.keys().map(|rel| Ok((rel.clone(), self.disk_hash(&self.out.join(rel))?))).collect()
    }

    fn outputs_intact(&self, rec: &StageRecord) -> Result<bool> {
        for (rel, hash) in &rec.outputs {
            let p = self.out.join(rel);
            if !p.exists() || &self.disk_hash(&p)? != hash {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn check_dependency(&self, stage: Stage, req: Stage) -> Result<&StageRecord> {
        let missing = |what: String| Error::Dependency {
            stage: stage.to_string(),
            requires: req.to_string(),
            missing: what,
        };
        let rec = self
            .manifest
            .stages
            .get(req.name())
            .ok_or_else(|| missing(format!("{} entry in {}", req, self.out.join("manifest.json").display())))?;
        if let Some(rel) = rec.outputs.keys().find(|rel| !self.out.join(rel).exists()) {
            return Err(missing(self.out.join(rel).display().to_string()));
        }
        Ok(rec)
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::Gen | Stage::Validate => json!(c.dataset),
            Stage::Extract => json!([c.surrogate, c.extract]),
            Stage::Probe => json!(c.probe),
            Stage::Sae => json!(c.sae),
            Stage::Select => json!(c.selection),
            Stage::Calibrate | Stage::Intervene | Stage::Ablate | Stage::Controls => json!(c.intervention),
            Stage::Geometry => json!(c.geometry),
            Stage::Report => json!(c.output.heatmaps),
        }
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let mut upstream = BTreeMap::new();
        for &req in stage.requires() {
            let rec = self.check_dependency(stage, req)?;
            upstream.insert(req.name(), self.disk_hashes(rec)?);
        }
        // Everything downstream of `select` also reads the dictionaries and shards.
        for extra in [Stage::Extract, Stage::Sae, Stage::Select, Stage::Calibrate] {
            if !upstream.contains_key(extra.name()) && stage > extra && stage != Stage::Validate {
                if let Some(r) = self.manifest.stages.get(extra.name()) {
                    upstream.insert(extra.name(), self.disk_hashes(r)?);
                }
            }
        }
        let input = json!({
            "stage": stage.name(),
            "seed": self.cfg.seed,
            "section": self.section(stage),
            "upstream": upstream,
            "version": TOOL_VERSION,
        });
        let input_hash = hex::encode(Sha256::digest(serde_json::to_vec(&input)?));
        if !self.overwrite {
            if let Some(rec) = self.manifest.stages.get(stage.name()) {
                if rec.input_hash == input_hash && self.outputs_intact(rec)? {
                    log::info!("{stage}: inputs unchanged, skipping");
                    return Ok(());
                }
            }
        }
        log::info!("{stage}: running");
        let start = Instant::now();
        let outputs = match stage {
            Stage::Gen => self.gen()?,
            Stage::Validate => self.validate()?,
            Stage::Extract => self.extract()?,
            Stage::Probe => self.probe()?,
            Stage::Sae => self.sae()?,
            Stage::Select => self.select()?,
            Stage::Calibrate => self.calibrate()?,
            Stage::Intervene => self.intervene()?,
            Stage::Ablate => self.ablate()?,
            Stage::Controls => self.controls()?,
            Stage::Geometry => self.geometry()?,
            Stage::Report => self.report()?,
        };
        let mut hashes = BTreeMap::new();
        for p in &outputs {
            let h = file_sha256(p)?;
            self.hashes.borrow_mut().insert(p.clone(), h.clone());
            hashes.insert(self.rel(p), h);
        }
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                input_hash,
                outputs: hashes,
                seconds: start.elapsed().as_secs_f64(),
            },
        );
        self.save_manifest()?;
        log::info!("{stage}: done in {:.1}s", start.elapsed().as_secs_f64());
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let p = self.out.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&p, e))
    }

    // Paths.

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn shard_path(&self, split: SplitName) -> PathBuf {
        self.out.join("shards").join(format!("{split}.shard"))
    }

    fn sae_path(&self, layer: usize) -> PathBuf {
        self.out.join("sae").join(format!("layer{layer}.sae"))
    }

    fn sets_dir(&self) -> PathBuf {
        self.out.join("sets")
    }

    fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn split_seed(&self, split: SplitName) -> u64 {
        let s = self.cfg.seeds();
        match split {
            SplitName::Train => s.train,
            SplitName::Val => s.val,
            SplitName::Test => s.test,
        }
    }

    fn split_size(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.cfg.dataset.train,
            SplitName::Val => self.cfg.dataset.val,
            SplitName::Test => self.cfg.dataset.test,
        }
    }

    fn extract_count(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.cfg.extract.train,
            SplitName::Val => self.cfg.extract.val,
            SplitName::Test => self.cfg.extract.test,
        }
    }

    fn model(&self) -> Result<SurrogateModel> {
        SurrogateModel::new(self.cfg.surrogate_config())
    }

    /// The first `extract_count` examples of a split.
    fn examples(&self, split: SplitName) -> Result<Vec<QAExample>> {
        let mut v = read_jsonl(&self.data_dir().join(split.jsonl_name()))?;
        v.truncate(self.extract_count(split));
        Ok(v)
    }

    fn inputs(&self, examples: &[QAExample]) -> Result<Vec<SurrogateInput>> {
        let vocab = self.cfg.vocabulary()?;
        examples.iter().map(|e| SurrogateInput::from_example(e, &vocab)).collect()
    }

    /// Streams a shard in chunks, checking ids against `examples`.
    fn for_each_chunk<F>(&self, split: SplitName, examples: &[QAExample], mut f: F) -> Result<()>
    where
        F: FnMut(&[ActivationRecord], &[QAExample]) -> Result<()>,
    {
        let mut reader = ShardReader::open(&self.shard_path(split))?;
        let mut chunk = Vec::with_capacity(128);
        let mut pos = 0;
        let mut flush = |chunk: &mut Vec<ActivationRecord>, pos: &mut usize| -> Result<()> {
            let exs = examples
                .get(*pos..*pos + chunk.len())
                .ok_or_else(|| Error::Invalid(format!("{split} shard holds more records than the split")))?;
            if let Some((r, e)) = chunk.iter().zip(exs).find(|(r, e)| r.id != e.id) {
                return Err(Error::Invalid(format!(
                    "id mismatch between {split} shard and split: first offender `{}` (split has `{}`)",
                    r.id, e.id
                )));
            }
            f(chunk, exs)?;
            *pos += chunk.len();
            chunk.clear();
            Ok(())
        };
        for rec in reader.by_ref() {
            chunk.push(rec?);
            if chunk.len() == 128 {
                flush(&mut chunk, &mut pos)?;
            }
        }
        if !chunk.is_empty() {
            flush(&mut chunk, &mut pos)?;
        }
        if pos != examples.len() {
            return Err(Error::Invalid(format!(
                "{split} shard holds {pos} records but {} were extracted",
                examples.len()
            )));
        }
        Ok(())
    }

    fn layer_states(&self, split: SplitName, examples: &[QAExample], layer: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        self.for_each_chunk(split, examples, |recs, _| {
            out.extend(recs.iter().map(|r| r.layer_f64(layer)));
            Ok(())
        })?;
        Ok(out)
    }

    fn load_sae(&self, layer: usize) -> Result<SaeParams> {
        SaeParams::load(&self.sae_path(layer))
    }

    fn load_sets(&self) -> Result<(FeatureSet, FeatureSet, FeatureSet)> {
        let p = self.sets_dir().join("feature_sets.jsonl");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let sets: Vec<FeatureSet> = text.lines().map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        let get = |k: SetKind| {
            sets.iter()
                .find(|s| s.kind == k)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("{} has no {k} set", p.display())))
        };
        Ok((get(SetKind::Pattern)?, get(SetKind::Global)?, get(SetKind::Union)?))
    }

    fn load_layer_pattern(&self, layer: usize) -> Result<FeatureSet> {
        let p = self.sets_dir().join(format!("layer{layer}_pattern.json"));
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn load_pool(&self) -> Result<Vec<usize>> {
        let p = self.sets_dir().join("live_pool.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn spec(&self, features: FeatureSet, lambda: f64, layer: usize) -> InterventionSpec {
        let mut s = InterventionSpec::new(features, lambda, layer);
        s.site = self.cfg.intervention.site;
        s
    }

    /// Test split prepared at the state the main-layer intervention edits.
    fn eval_set(&self, sae: &SaeParams, layer: usize) -> Result<(SurrogateModel, EvalSet)> {
        let model = self.model()?;
        let state_layer = self.spec(FeatureSet::new(SetKind::Pattern, [], "", None), 1.0, layer).state_layer()?;
        let examples = self.examples(SplitName::Test)?;
        let inputs = self.inputs(&examples)?;
        let states = self.layer_states(SplitName::Test, &examples, state_layer)?;
        let set = EvalSet::from_states(&model, &inputs, states, sae, state_layer)?;
        Ok((model, set))
    }

    fn write_json<T: Serialize>(&self, path: PathBuf, value: &T) -> Result<PathBuf> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    // Stages.

    fn gen(&self) -> Result<Vec<PathBuf>> {
        let gen = self.cfg.generator()?;
        let dir = self.data_dir();
        let mut out = Vec::new();
        for split in SplitName::ALL {
            let jsonl = dir.join(split.jsonl_name());
            if jsonl.exists() && !self.overwrite {
                return Err(Error::Exists(jsonl));
            }
            let s = generate_split(&gen, split, self.split_seed(split), self.split_size(split), &dir, true)?;
            let mut img_hash = Sha256::new();
            for ex in &s.records {
                let p = dir.join(&ex.image);
                img_hash.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
            let digest = self.write_json(
                dir.join(format!("images_{split}.json")),
                &json!({"count": s.records.len(), "sha256": hex::encode(img_hash.finalize())}),
            )?;
            out.push(jsonl);
            out.push(digest);
        }
        Ok(out)
    }

    fn validate(&self) -> Result<Vec<PathBuf>> {
        let vocab = self.cfg.vocabulary()?;
        let mut rows = Vec::new();
        let mut failed = None;
        for split in SplitName::ALL {
            let r = validate_split(&self.data_dir().join(split.jsonl_name()), &vocab)?;
            for w in &r.warnings {
                log::warn!("{split}: {w}");
            }
            for issue in r.issues.iter().take(10) {
                log::error!("{split}: {issue:?}");
            }
            if !r.is_clean() && failed.is_none() {
                failed = Some((split, r.mismatches + r.parse_failures));
            }
            rows.push(json!({
                "split": split.as_str(),
                "records": r.records,
                "mismatches": r.mismatches,
                "parse_failures": r.parse_failures,
            }));
        }
        let files = Table::from_rows(Schema::Validation, &rows)?.write(&self.reports_dir())?;
        if let Some((split, n)) = failed {
            return Err(Error::Validation {
                split: split.to_string(),
                mismatches: n,
            });
        }
        Ok(files)
    }

    fn extract(&self) -> Result<Vec<PathBuf>> {
        let model = self.model()?;
        let c = model.config();
        let header = ShardHeader::new(c.n_layers, c.n_tokens, c.width, c.grid);
        let mut out = Vec::new();
        for split in SplitName::ALL {
            let examples = self.examples(split)?;
            let inputs = self.inputs(&examples)?;
            let path = self.shard_path(split);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut w = ShardWriter::create(&path, header.clone())?;
            for chunk in inputs.chunks(64) {
                for rec in model.forward_batch(chunk)? {
                    w.write(&rec)?;
                }
            }
            w.finish()?;
            out.push(path.clone());
            out.push(crate::activation::shard::index_path(&path));
        }
        Ok(out)
    }

    fn probe(&self) -> Result<Vec<PathBuf>> {
        let scope = self.cfg.probe.pooling;
        let pooled = |split| -> Result<(Vec<Vec<Vec<f64>>>, Vec<usize>)> {
            let examples = self.examples(split)?;
            let mut layers: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.cfg.surrogate.n_layers];
            self.for_each_chunk(split, &examples, |recs, _| {
                for r in recs {
                    for (l, v) in layers.iter_mut().enumerate() {
                        v.push(pool_tokens(r, l, scope)?);
                    }
                }
                Ok(())
            })?;
            Ok((layers, examples.iter().map(|e| e.task_type.index()).collect()))
        };
        let (tr, ytr) = pooled(SplitName::Train)?;
        let (va, yva) = pooled(SplitName::Val)?;
        let report = layer_sweep(
            &ProbeData { layers: &tr, labels: &ytr },
            &ProbeData { layers: &va, labels: &yva },
            crate::activation::surrogate::N_TASKS,
            &self.cfg.probe.hyper,
            &self.cfg.seeds().probe,
        )?;
        let mut files = Table::from_rows(Schema::ProbeTrajectory, &report.layers)?.write(&self.reports_dir())?;
        files.push(self.write_json(self.reports_dir().join("probe.json"), &report)?);
        Ok(files)
    }

    fn sae(&self) -> Result<Vec<PathBuf>> {
        let examples = self.examples(SplitName::Train)?;
        let mut files = Vec::new();
        for layer in self.cfg.sae_layers() {
            let mut rows = Vec::new();
            self.for_each_chunk(SplitName::Train, &examples, |recs, _| {
                for r in recs {
                    for t in 0..r.n_tokens() {
                        rows.push(r.token(layer, t).iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
                    }
                }
                Ok(())
            })?;
            let layer_seed = seed::derive(self.cfg.seeds().sae, layer as u64);
            if rows.len() > self.cfg.sae.max_vectors {
                let mut keep = sample(&mut seed::rng_str(layer_seed, "sae-vectors"), rows.len(), self.cfg.sae.max_vectors).into_vec();
                keep.sort_unstable();
                rows = keep.into_iter().map(|i| std::mem::take(&mut rows[i])).collect();
            }
            let data = Matrix::from_rows(&rows);
            drop(rows);
            let cfg = crate::sae::SaeTrainConfig {
                seed: layer_seed,
                ..self.cfg.sae.train.clone()
            };
            let (params, stats) = train_sae(&data, &cfg)?;
            let path = self.sae_path(layer);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            params.save(&path)?;
            files.push(path);
            files.push(self.write_json(self.out.join("sae").join(format!("layer{layer}_stats.json")), &stats)?);
        }
        Ok(files)
    }

    /// Per-example image-pooled codes of the train split at `layer`.
    fn train_codes(&self, sae: &SaeParams, layer: usize, examples: &[QAExample]) -> Result<Vec<Vec<f64>>> {
        let mut codes = Vec::with_capacity(examples.len());
        self.for_each_chunk(SplitName::Train, examples, |recs, _| {
            codes.extend(circuits::pooled_image_codes(recs, sae, layer)?);
            Ok(())
        })?;
        Ok(codes)
    }

    fn select(&self) -> Result<Vec<PathBuf>> {
        let sel = &self.cfg.selection;
        let examples = self.examples(SplitName::Train)?;
        let dir = self.sets_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files = Vec::new();
        let main = self.cfg.sae_layer();
        for layer in self.cfg.sae_layers() {
            let sae = self.load_sae(layer)?;
            let codes = self.train_codes(&sae, layer, &examples)?;
            let contrast = |task| examples.iter().map(|e| e.task_type == task).collect::<Vec<_>>();
            let pt = circuits::compute_selectivity(&codes, &contrast(sel.pattern_task), sel.eps)?;
            let pattern = circuits::build_set(&pt, SetKind::Pattern, sel.rule)?;
            if layer != main {
                files.push(self.write_json(dir.join(format!("layer{layer}_pattern.json")), &pattern)?);
                continue;
            }
            let gt = circuits::compute_selectivity(&codes, &contrast(sel.global_task), sel.eps)?;
            let global = circuits::build_set(&gt, SetKind::Global, sel.rule)?;
            let union = circuits::union(&pattern, &global);
            let mut lines = String::new();
            for s in [&pattern, &global, &union] {
                lines.push_str(&serde_json::to_string(s)?);
                lines.push('\n');
            }
            for (name, table) in [("selectivity_pattern.csv", &pt), ("selectivity_global.csv", &gt)] {
                let p = dir.join(name);
                std::fs::write(&p, table.to_csv()).map_err(|e| Error::io(&p, e))?;
                files.push(p);
            }
            let p = dir.join("feature_sets.jsonl");
            std::fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
            files.push(p);
            files.push(self.write_json(dir.join("live_pool.json"), &circuits::live_features(&codes))?);
        }
        Ok(files)
    }

    fn calibrations(&self, set: &EvalSet, sae: &SaeParams) -> Result<Vec<(String, Calibration)>> {
        let (pattern, global, union) = self.load_sets()?;
        let layer = self.cfg.sae_layer();
        let reference = self.spec(pattern, self.cfg.intervention.steer_lambda, layer);
        let grid = &self.cfg.intervention.calibration;
        Ok(vec![
            ("union".to_string(), calibrate_norm_match(set, sae, &reference, &union, grid)?),
            ("global".to_string(), calibrate_norm_match(set, sae, &reference, &global, grid)?),
        ])
    }

    fn calibrate(&self) -> Result<Vec<PathBuf>> {
        let layer = self.cfg.sae_layer();
        let sae = self.load_sae(layer)?;
        let (_, set) = self.eval_set(&sae, layer)?;
        let cals = self.calibrations(&set, &sae)?;
        let reference = format!("pattern@{:.2}", self.cfg.intervention.steer_lambda);
        let rows: Vec<_> = cals
            .iter()
            .map(|(t, c)| {
                json!({"target": t, "reference": reference, "lambda": c.lambda, "residual": c.residual,
                       "reference_rel": c.reference_rel, "target_rel": c.target_rel})
            })
            .collect();
        let mut files = Table::from_rows(Schema::Calibration, &rows)?.write(&self.reports_dir())?;
        let full: BTreeMap<_, _> = cals.into_iter().collect();
        files.push(self.write_json(self.reports_dir().join("calibration.json"), &full)?);
        Ok(files)
    }

    fn calibrated_lambdas(&self) -> Result<(f64, f64)> {
        let p = self.reports_dir().join("calibration.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let cals: BTreeMap<String, Calibration> = serde_json::from_str(&text)?;
        let get = |k: &str| {
            cals.get(k)
                .map(|c| c.lambda)
                .ok_or_else(|| Error::Invalid(format!("{} lacks the {k} calibration", p.display())))
        };
        Ok((get("union")?, get("global")?))
    }

    fn intervene(&self) -> Result<Vec<PathBuf>> {
        let layer = self.cfg.sae_layer();
        let iv = &self.cfg.intervention;
        let sae = self.load_sae(layer)?;
        let (model, set) = self.eval_set(&sae, layer)?;
        let (pattern, global, union) = self.load_sets()?;
        let (lu, lg) = self.calibrated_lambdas()?;
        let s = iv.steer_lambda;
        let configs = [
            (&pattern, s),
            (&global, s),
            (&union, s),
            (&global, lg),
            (&union, lu),
        ];
        let mut main = Vec::new();
        for (fs, l) in configs {
            let m = evaluate_run(&set, &model, &sae, &self.spec(fs.clone(), l, layer), None)?;
            main.push(ResultRow::new(format!("{}@{l:.2}", fs.kind), &m, None));
        }
        let mut files = Table::from_rows(Schema::MainTable, &main)?.write(&self.reports_dir())?;

        let scales = intervention::scale_grid(iv.sweep.0, iv.sweep.1, iv.sweep.2);
        let mut sweep = Vec::new();
        for fs in [&pattern, &union] {
            for r in intervention::scale_sweep(&set, &model, &sae, &self.spec(fs.clone(), 1.0, layer), &scales)? {
                sweep.push(json!({"config": fs.kind.to_string(), "layer": layer, "scale": r.scale,
                                  "delta_pp": r.delta_pp, "drift": r.drift}));
            }
        }
        files.extend(Table::from_rows(Schema::SweepTable, &sweep)?.write(&self.reports_dir())?);
        let target = set.relative_perturbation(&sae, &self.spec(pattern.clone(), s, layer));
        drop(set);

        let mut layers = self.cfg.sae_layers();
        layers.sort_unstable();
        let mut saes = BTreeMap::new();
        let mut patterns = BTreeMap::new();
        for &l in &layers {
            if l == layer {
                patterns.insert(l, pattern.clone());
            } else {
                patterns.insert(l, self.load_layer_pattern(l)?);
            }
            saes.insert(l, self.load_sae(l)?);
        }
        let setups: Vec<LayerSetup<'_>> = layers
            .iter()
            .map(|&l| LayerSetup {
                layer: l,
                sae: saes.get(&l),
                features: patterns[&l].clone(),
            })
            .collect();
        let examples = self.examples(SplitName::Test)?;
        let inputs = self.inputs(&examples)?;
        let rows = intervention::layer_sensitivity_profile(&model, &setups, ScaleMode::NormMatched(target), iv.site, |sl, sae| {
            let states = self.layer_states(SplitName::Test, &examples, sl)?;
            EvalSet::from_states(&model, &inputs, states, sae, sl)
        })?;
        files.extend(Table::from_rows(Schema::Sensitivity, &rows)?.write(&self.reports_dir())?);
        Ok(files)
    }

    fn ablate(&self) -> Result<Vec<PathBuf>> {
        let layer = self.cfg.sae_layer();
        let sae = self.load_sae(layer)?;
        let (model, set) = self.eval_set(&sae, layer)?;
        let (pattern, global, union) = self.load_sets()?;
        let random = circuits::random_control(union.len(), sae.m, self.cfg.seeds().controls.first().copied().unwrap_or(0))?;
        let mut rows = Vec::new();
        for fs in [&pattern, &global, &union, &random] {
            let r = intervention::zero_ablation_fliprate(&set, &model, &sae, fs, layer)?;
            rows.push(json!({"set": fs.kind.to_string(), "flip_pct": r.flip_pct, "set_size": r.set_size,
                             "dictionary_fraction": r.dictionary_fraction}));
        }
        Table::from_rows(Schema::Ablation, &rows)?.write(&self.reports_dir())
    }

    fn controls(&self) -> Result<Vec<PathBuf>> {
        let layer = self.cfg.sae_layer();
        let iv = &self.cfg.intervention;
        let sae = self.load_sae(layer)?;
        let (model, set) = self.eval_set(&sae, layer)?;
        let (pattern, global, union) = self.load_sets()?;
        let sets = ControlSets {
            pattern,
            global,
            union,
            pool: self.load_pool()?,
        };
        let seeds = self.cfg.seeds();
        let report = intervention::run_controls(&set, &model, &sae, &sets, layer, iv.steer_lambda, &seeds.controls, &iv.calibration)?;
        let mut files = Table::from_rows(Schema::ControlsTable, &report.rows)?.write(&self.reports_dir())?;

        let bundle = ControlBundle::evaluate(&set, &model, &sae, &sets, layer, iv.steer_lambda, report.union_lambda, &iv.bootstrap.perm_seeds)?;
        let grid = intervention::BootstrapGrid {
            seed: seeds.bootstrap,
            ..iv.bootstrap.clone()
        };
        let mut boot = Vec::new();
        let mut subs = Vec::new();
        for (name, per_seed) in &bundle.configs {
            let run = |p: u64, idx: &[usize]| -> Result<EvalMetrics> { Ok(EvalMetrics::aggregate(&per_seed[&p], Some(idx))) };
            let r = intervention::bootstrap(set.len(), &grid, run)?;
            boot.push(json!({"config": name, "delta_pp_mean": r.delta_pp_mean, "delta_pp_std": r.delta_pp_std,
                             "chg_mean": r.chg_mean, "chg_std": r.chg_std}));
            if name.starts_with("pattern") || name.starts_with("union") {
                for row in intervention::subsample_sweep(set.len(), &grid, &iv.subsample_sizes, run)? {
                    subs.push(json!({"config": name, "n": row.n, "delta_pp_mean": row.delta_pp_mean,
                                     "delta_pp_std": row.delta_pp_std, "chg_mean": row.chg_mean, "chg_std": row.chg_std}));
                }
            }
        }
        files.extend(Table::from_rows(Schema::BootstrapTable, &boot)?.write(&self.reports_dir())?);
        files.extend(Table::from_rows(Schema::SubsampleTable, &subs)?.write(&self.reports_dir())?);
        Ok(files)
    }

    fn geometry(&self) -> Result<Vec<PathBuf>> {
        let g = &self.cfg.geometry;
        let layer = self.cfg.sae_layer();
        let sae = self.load_sae(layer)?;
        let (pattern, global, _) = self.load_sets()?;
        let examples = self.examples(SplitName::Train)?;
        let codes = self.train_codes(&sae, layer, &examples)?;
        let inter = geometry::interference_report(&codes, &sae, &pattern, &global)?;
        let mut files = Table::from_rows(Schema::Interference, &[&inter])?.write(&self.reports_dir())?;

        let gseed = self.cfg.seeds().geometry;
        let d = sae.d;
        let mut rng = seed::rng_str(gseed, "directions");
        let dir = random_orthonormal(1, d, &mut rng).row(0).to_vec();
        let ln = geometry::layernorm_amplification_sim(
            &dir,
            &g.ln_sweep,
            &geometry::LnSimConfig {
                dim: d,
                seed: gseed,
                ..Default::default()
            },
        )?;
        let rows: Vec<_> = ln.points.iter().map(|(x, y)| json!({"delta_norm": x, "nsr": y})).collect();
        files.extend(Table::from_rows(Schema::LnCurve, &rows)?.write(&self.reports_dir())?);

        let dk = 16;
        let gauss = |tag: &str| Matrix::gaussian(dk, d, 1.0 / (d as f64).sqrt(), &mut seed::rng_str(gseed, tag));
        let ecfg = geometry::EntropyConfig {
            seed: gseed,
            ..Default::default()
        };
        let wq = gauss("w_q");
        let curve = geometry::attention_entropy_probe(&wq, &wq, &dir, &g.entropy_norms, &ecfg)?;
        let max_h = (ecfg.patches as f64).ln();
        let rows: Vec<_> = curve
            .iter()
            .map(|(s, h)| json!({"signal_norm": s, "entropy": h, "max_entropy": max_h}))
            .collect();
        files.extend(Table::from_rows(Schema::EntropyCurve, &rows)?.write(&self.reports_dir())?);

        let model = self.model()?;
        let test = self.examples(SplitName::Test)?;
        let first = test.first().ok_or_else(|| Error::Invalid("test split is empty".into()))?;
        let input = SurrogateInput::from_example(first, &self.cfg.vocabulary()?)?;
        let h0 = model.forward(&input)?.layer_f64(layer);
        let h0 = h0[..d].to_vec();
        let v = sae.feature(pattern.indices[0]).to_vec();
        let next = (layer + 1).min(model.n_layers() - 1);
        let curv = geometry::curvature_drift_error(|h| model.block_map(next, h), &h0, &v, &g.curvature_alphas)?;
        for w in &curv.warnings {
            log::warn!("{w}");
        }
        let rows: Vec<_> = curv
            .points
            .iter()
            .map(|p| json!({"alpha": p.alpha, "e_drift": p.e_drift, "measured": p.measured}))
            .collect();
        files.extend(Table::from_rows(Schema::Curvature, &rows)?.write(&self.reports_dir())?);

        let dp = geometry::mean_effective_direction(&codes, &sae, &pattern)?;
        let dg = geometry::mean_effective_direction(&codes, &sae, &global)?;
        let osp = geometry::osp_compose(&dp.delta, &dg.delta)?;
        let snr = geometry::snr_analysis(&dp.delta, &dg.delta, g.collapse_nsr)?;
        files.push(self.write_json(
            self.reports_dir().join("geometry.json"),
            &json!({"pattern_direction": dp, "global_direction": dg, "osp_union": osp,
                    "pattern_vs_global_snr": snr, "curvature_fit": {"slope": curv.slope, "r2": curv.r2},
                    "ln_slope": ln.slope}),
        )?);
        Ok(files)
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let layer = self.cfg.sae_layer();
        let sae = self.load_sae(layer)?;
        let (pattern, _, _) = self.load_sets()?;
        let examples = self.examples(SplitName::Test)?;
        let want = self.cfg.output.heatmaps;
        let feature = pattern.indices[0];
        let mut files = Vec::new();
        let mut drawn = 0;
        self.for_each_chunk(SplitName::Test, &examples, |recs, exs| {
            for (r, e) in recs.iter().zip(exs) {
                if drawn >= want || e.task_type != self.cfg.selection.pattern_task {
                    continue;
                }
                let map = circuits::spatial_map(r, &sae, feature, layer)?;
                let p = self.out.join("heatmaps").join(format!("{}_f{feature}.png", r.id));
                plot_heatmap(&map, &p)?;
                files.push(p);
                drawn += 1;
            }
            Ok(())
        })?;
        Ok(files)
    }
}

/// Full-split outcomes of the bootstrap configurations, per permutation
/// seed. Deterministic configurations share one evaluation.
pub struct ControlBundle {
    pub configs: Vec<(String, HashMap<u64, Vec<Outcome>>)>,
}

impl ControlBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        set: &EvalSet,
        model: &SurrogateModel,
        sae: &SaeParams,
        sets: &ControlSets,
        layer: usize,
        steer: f64,
        union_lambda: f64,
        perm_seeds: &[u64],
    ) -> Result<Self> {
        let fixed = |fs: &FeatureSet, l: f64| -> Result<HashMap<u64, Vec<Outcome>>> {
            let o = set.outcomes(model, sae, &InterventionSpec::new(fs.clone(), l, layer))?;
            Ok(perm_seeds.iter().map(|&p| (p, o.clone())).collect())
        };
        let union_spec = InterventionSpec::new(sets.union.clone(), union_lambda, layer);
        let union_rel = set.relative_perturbation(sae, &union_spec);
        let mut permuted = HashMap::new();
        let mut random = HashMap::new();
        for &p in perm_seeds {
            let ps = circuits::permuted_control(&sets.union, &sets.pool, p)?;
            let unit = set.relative_perturbation(sae, &InterventionSpec::new(ps.clone(), 2.0, layer));
            let lam = intervention::norm_preserving_lambda(union_lambda, union_rel, unit);
            permuted.insert(p, set.outcomes(model, sae, &InterventionSpec::new(ps, lam, layer))?);
            let rs = circuits::random_control(sets.union.len(), sae.m, p)?;
            random.insert(p, set.outcomes(model, sae, &InterventionSpec::new(rs, union_lambda, layer))?);
        }
        Ok(Self {
            configs: vec![
                (format!("pattern@{steer:.2}"), fixed(&sets.pattern, steer)?),
                (format!("union@{union_lambda:.2}"), fixed(&sets.union, union_lambda)?),
                (format!("permuted@{union_lambda:.2}"), permuted),
                (format!("random@{union_lambda:.2}"), random),
            ],
        })
    }
}
