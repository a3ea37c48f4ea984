// SPDX-License-Identifier: MIT OR Apache-2.0

//! Split generation and the on-disk dataset layout.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::question::{instantiate_question, QAExample};
use super::render::{encode_png, render_scene};
use super::scene::{sample_scene, weighted_index, Difficulty, GeneratorConfig, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn jsonl_name(self) -> String {
        format!("reasoning_{}.jsonl", self.as_str())
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub seed: u64,
    pub records: Vec<QAExample>,
}

/// Builds record `index` of a split together with its image. Pure in its inputs.
pub fn generate_record(config: &GeneratorConfig, name: SplitName, split_seed: u64, index: usize) -> Result<(QAExample, RgbImage)> {
    let ex_seed = seed::derive(split_seed, index as u64);
    let mut rng = seed::rng_str(ex_seed, "task");
    let task = TaskType::ALL[weighted_index(&config.task_weights, &mut rng)];
    let difficulty = Difficulty::ALL[weighted_index(&config.difficulty_weights, &mut rng)];
    let scene = sample_scene(ex_seed, task, difficulty, config)?;
    let mut ex = instantiate_question(&scene, task, difficulty, ex_seed, config)?;
    let id = format!("{}_{index:05}", name.as_str());
    ex.image = format!("images/{id}.png");
    ex.id = id;
    let img = render_scene(&scene, &config.vocab)?;
    Ok((ex, img))
}

/// Generates records in memory without touching the filesystem.
pub fn generate_records(config: &GeneratorConfig, name: SplitName, split_seed: u64, size: usize) -> Result<DatasetSplit> {
    config.validate()?;
    let records = (0..size)
        .into_par_iter()
        .map(|i| generate_record(config, name, split_seed, i).map(|(ex, _)| ex))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        name,
        seed: split_seed,
        records,
    })
}

/// Writes `images/*.png` and `reasoning_{split}.jsonl` under `out_dir`.
///
/// Refuses to replace an existing JSONL file unless `overwrite` is set.
pub fn generate_split(
    config: &GeneratorConfig,
    name: SplitName,
    split_seed: u64,
    size: usize,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetSplit> {
    config.validate()?;
    let jsonl = out_dir.join(name.jsonl_name());
    if jsonl.exists() && !overwrite {
        return Err(Error::Exists(jsonl));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let records = (0..size)
        .into_par_iter()
        .map(|i| -> Result<QAExample> {
            let (ex, img) = generate_record(config, name, split_seed, i)?;
            let path = out_dir.join(&ex.image);
            let png = encode_png(&img)?;
            std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
            Ok(ex)
        })
        .collect::<Result<Vec<_>>>()?;

    write_jsonl(&jsonl, &records)?;
    Ok(DatasetSplit {
        name,
        seed: split_seed,
        records,
    })
}

pub fn write_jsonl(path: &Path, records: &[QAExample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Path of the JSONL file for `name` under `root`.
pub fn split_path(root: &Path, name: SplitName) -> PathBuf {
    root.join(name.jsonl_name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_is_order_independent() {
        let cfg = GeneratorConfig::default();
        let (a, _) = generate_record(&cfg, SplitName::Val, 9, 17).unwrap();
        let all = generate_records(&cfg, SplitName::Val, 9, 20).unwrap();
        assert_eq!(all.records[17], a);
        assert_eq!(a.id, "val_00017");
    }

    #[test]
    fn refuses_existing_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::default();
        generate_split(&cfg, SplitName::Test, 1, 3, dir.path(), false).unwrap();
        assert!(matches!(
            generate_split(&cfg, SplitName::Test, 1, 3, dir.path(), false),
            Err(Error::Exists(_))
        ));
        generate_split(&cfg, SplitName::Test, 1, 3, dir.path(), true).unwrap();
    }
}
