// SPDX-License-Identifier: MIT OR Apache-2.0

// Shared setup for the examples that need a trained dictionary.

#![allow(dead_code)]

use visual_circuits::activation::{ActivationRecord, SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::circuits::{build_set, compute_selectivity, pooled_image_codes, union, FeatureSet, SelectionRule, SetKind, DEFAULT_EPS};
use visual_circuits::linalg::Matrix;
use visual_circuits::sae::{train_sae, SaeParams, SaeTrainConfig};
use visual_circuits::svr::{generate_records, GeneratorConfig, QAExample, SplitName, TaskType, Vocabulary};
use visual_circuits::Result;

pub const LAYER: usize = 5;

pub struct Fixture {
    pub model: SurrogateModel,
    pub train: Vec<QAExample>,
    pub train_recs: Vec<ActivationRecord>,
    pub test: Vec<QAExample>,
    pub test_inputs: Vec<SurrogateInput>,
    pub sae: SaeParams,
    pub codes: Vec<Vec<f64>>,
    pub pattern: FeatureSet,
    pub global: FeatureSet,
    pub union: FeatureSet,
}

pub fn inputs(examples: &[QAExample]) -> Result<Vec<SurrogateInput>> {
    let vocab = Vocabulary::default();
    examples.iter().map(|e| SurrogateInput::from_example(e, &vocab)).collect()
}

/// Small train/test splits, a dictionary at `LAYER` and the selected sets.
pub fn fixture(n_train: usize, n_test: usize, sae_steps: usize) -> Result<Fixture> {
    let gen = GeneratorConfig::default();
    let model = SurrogateModel::new(SurrogateConfig::default())?;
    let train = generate_records(&gen, SplitName::Train, 11, n_train)?.records;
    let test = generate_records(&gen, SplitName::Test, 13, n_test)?.records;
    let train_recs = model.forward_batch(&inputs(&train)?)?;
    let test_inputs = inputs(&test)?;

    let rows: Vec<Vec<f64>> = train_recs
        .iter()
        .flat_map(|r| (0..r.n_tokens()).map(move |t| r.token(LAYER, t).iter().map(|&v| f64::from(v)).collect()))
        .take(12_000)
        .collect();
    let cfg = SaeTrainConfig {
        steps: sae_steps,
        ..SaeTrainConfig::default()
    };
    let (sae, _) = train_sae(&Matrix::from_rows(&rows), &cfg)?;

    let codes = pooled_image_codes(&train_recs, &sae, LAYER)?;
    let pick = |task: TaskType, kind| -> Result<FeatureSet> {
        let positive: Vec<bool> = train.iter().map(|e| e.task_type == task).collect();
        build_set(&compute_selectivity(&codes, &positive, DEFAULT_EPS)?, kind, SelectionRule::default())
    };
    let pattern = pick(TaskType::Pattern, SetKind::Pattern)?;
    let global = pick(TaskType::Global, SetKind::Global)?;
    let union = union(&pattern, &global);
    Ok(Fixture {
        model,
        train,
        train_recs,
        test,
        test_inputs,
        sae,
        codes,
        pattern,
        global,
        union,
    })
}
