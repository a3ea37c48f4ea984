// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::sync::OnceLock;

use visual_circuits::activation::{ActivationRecord, SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::circuits::{build_set, compute_selectivity, pooled_image_codes, union, FeatureSet, SelectionRule, SetKind, DEFAULT_EPS};
use visual_circuits::linalg::Matrix;
use visual_circuits::sae::{train_sae, SaeParams, SaeTrainConfig};
use visual_circuits::svr::{generate_records, GeneratorConfig, QAExample, SplitName, TaskType, Vocabulary};

pub const LAYER: usize = 5;

pub struct Trained {
    pub model: SurrogateModel,
    pub train: Vec<QAExample>,
    pub train_recs: Vec<ActivationRecord>,
    pub test_inputs: Vec<SurrogateInput>,
    pub test_recs: Vec<ActivationRecord>,
    pub sae: SaeParams,
    pub codes: Vec<Vec<f64>>,
    pub pattern: FeatureSet,
    pub global: FeatureSet,
    pub union: FeatureSet,
}

pub fn inputs(examples: &[QAExample]) -> Vec<SurrogateInput> {
    let vocab = Vocabulary::default();
    examples.iter().map(|e| SurrogateInput::from_example(e, &vocab).unwrap()).collect()
}

pub fn token_rows(recs: &[ActivationRecord], layer: usize, cap: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = recs
        .iter()
        .flat_map(|r| (0..r.n_tokens()).map(move |t| r.token(layer, t).iter().map(|&v| f64::from(v)).collect()))
        .take(cap)
        .collect();
    Matrix::from_rows(&rows)
}

/// One trained dictionary at the plant layer shared by every test in a binary.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let gen = GeneratorConfig::default();
        let model = SurrogateModel::new(SurrogateConfig::default()).unwrap();
        let train = generate_records(&gen, SplitName::Train, 101, 1200).unwrap().records;
        let test = generate_records(&gen, SplitName::Test, 103, 400).unwrap().records;
        let train_recs = model.forward_batch(&inputs(&train)).unwrap();
        let test_inputs = inputs(&test);
        let test_recs = model.forward_batch(&test_inputs).unwrap();
        let cfg = SaeTrainConfig {
            steps: 1200,
            ..SaeTrainConfig::default()
        };
        let (sae, _) = train_sae(&token_rows(&train_recs, LAYER, 20_000), &cfg).unwrap();
        let codes = pooled_image_codes(&train_recs, &sae, LAYER).unwrap();
        let pick = |task: TaskType, kind| {
            let pos: Vec<bool> = train.iter().map(|e| e.task_type == task).collect();
            build_set(&compute_selectivity(&codes, &pos, DEFAULT_EPS).unwrap(), kind, SelectionRule::default()).unwrap()
        };
        let pattern = pick(TaskType::Pattern, SetKind::Pattern);
        let global = pick(TaskType::Global, SetKind::Global);
        let union = union(&pattern, &global);
        Trained {
            model,
            train,
            train_recs,
            test_inputs,
            test_recs,
            sae,
            codes,
            pattern,
            global,
            union,
        }
    })
}
