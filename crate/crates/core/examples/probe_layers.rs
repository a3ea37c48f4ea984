// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task-type probes per layer, with the shuffled-label control.

use visual_circuits::activation::{PoolScope, SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::probing::{layer_sweep, pooled_features, ProbeData, ProbeHyper};
use visual_circuits::svr::{generate_records, GeneratorConfig, SplitName, TaskType, Vocabulary};

fn main() -> anyhow::Result<()> {
    let model = SurrogateModel::new(SurrogateConfig::default())?;
    let gen = GeneratorConfig::default();
    let vocab = Vocabulary::default();
    let load = |split, seed, n| -> anyhow::Result<(Vec<Vec<Vec<f64>>>, Vec<usize>)> {
        let s = generate_records(&gen, split, seed, n)?;
        let inputs: Vec<SurrogateInput> = s.records.iter().map(|e| SurrogateInput::from_example(e, &vocab)).collect::<Result<_, _>>()?;
        let feats = pooled_features(&model.forward_batch(&inputs)?, PoolScope::All)?;
        Ok((feats, s.records.iter().map(|e| e.task_type.index()).collect()))
    };
    let (xtr, ytr) = load(SplitName::Train, 1, 1200)?;
    let (xva, yva) = load(SplitName::Val, 2, 400)?;
    let report = layer_sweep(
        &ProbeData { layers: &xtr, labels: &ytr },
        &ProbeData { layers: &xva, labels: &yva },
        TaskType::ALL.len(),
        &ProbeHyper::default(),
        &[0, 1, 2],
    )?;
    println!("layer  acc            shuffled");
    for l in &report.layers {
        println!("{:>5}  {:.3} ± {:.3}  {:.3}", l.layer, l.mean_acc, l.std_acc, l.shuffled_acc);
    }
    println!("best layer: {}", report.best_layer);
    Ok(())
}
