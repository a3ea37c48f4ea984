// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains a TopK dictionary on post-plant token states and checks its
//! invariants along the way.

use visual_circuits::activation::{SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::linalg::Matrix;
use visual_circuits::sae::{mean_relative_error, train_sae_with, SaeParams, SaeTrainConfig};
use visual_circuits::svr::{generate_records, GeneratorConfig, SplitName, Vocabulary};

fn main() -> anyhow::Result<()> {
    let layer = 5;
    let model = SurrogateModel::new(SurrogateConfig::default())?;
    let vocab = Vocabulary::default();
    let split = generate_records(&GeneratorConfig::default(), SplitName::Train, 3, 400)?;
    let inputs: Vec<SurrogateInput> = split.records.iter().map(|e| SurrogateInput::from_example(e, &vocab)).collect::<Result<_, _>>()?;
    let rows: Vec<Vec<f64>> = model
        .forward_batch(&inputs)?
        .iter()
        .flat_map(|r| (0..r.n_tokens()).map(move |t| r.token(layer, t).iter().map(|&v| f64::from(v)).collect()))
        .collect();
    let data = Matrix::from_rows(&rows);
    println!("{} token vectors of width {}", data.rows(), data.cols());

    let cfg = SaeTrainConfig {
        steps: 1000,
        ..SaeTrainConfig::default()
    };
    let mut worst = 0.0f64;
    let (sae, stats) = train_sae_with(&data, &cfg, |step, p| {
        worst = worst.max(p.max_norm_deviation());
        if step % 250 == 0 {
            println!("step {step:>5}");
        }
    })?;
    println!("loss {:.4} -> {:.4}", stats.initial_loss, stats.final_loss);
    println!("relative error {:.3}, dead features {}", stats.final_rel_error, stats.dead_features);
    println!("worst decoder-norm deviation during training: {worst:.2e}");

    let code = sae.encode_sparse(data.row(0))?;
    println!("first vector: {} active of {} (k = {})", code.nnz(), sae.m, sae.k);

    let path = std::env::temp_dir().join("layer5.sae");
    sae.save(&path)?;
    let back = SaeParams::load(&path)?;
    // Weights are stored as f32, so compare codes rather than bits.
    let gap = (0..100)
        .map(|i| {
            let (a, b) = (sae.encode(data.row(i)), back.encode(data.row(i)));
            a.and_then(|a| b.map(|b| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)))
        })
        .collect::<visual_circuits::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("largest code difference after reload: {gap:.1e}");
    println!("reloaded relative error {:.3}", mean_relative_error(&back, &data)?);
    Ok(())
}
