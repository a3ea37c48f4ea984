// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the surrogate network over a small split, streams the states into a
//! shard and reads them back.

use visual_circuits::activation::{read_shard, ShardHeader, ShardWriter, SurrogateConfig, SurrogateInput, SurrogateModel};
use visual_circuits::svr::{generate_records, GeneratorConfig, SplitName, Vocabulary};

fn main() -> anyhow::Result<()> {
    let model = SurrogateModel::new(SurrogateConfig::default())?;
    let c = model.config().clone();
    let vocab = Vocabulary::default();
    let split = generate_records(&GeneratorConfig::default(), SplitName::Val, 5, 64)?;
    let inputs: Vec<SurrogateInput> = split.records.iter().map(|e| SurrogateInput::from_example(e, &vocab)).collect::<Result<_, _>>()?;

    let path = std::env::temp_dir().join("svtc_example.shard");
    let mut w = ShardWriter::create(&path, ShardHeader::new(c.n_layers, c.n_tokens, c.width, c.grid))?;
    for rec in model.forward_batch(&inputs)? {
        w.write(&rec)?;
    }
    let index = w.finish()?;
    println!("wrote {} records ({} bytes) to {}", index.len(), std::fs::metadata(&path)?.len(), path.display());

    let (header, recs) = read_shard(&path)?;
    println!("header: {} layers x {} tokens x {} dims, grid {}x{}", header.n_layers, header.n_tokens, header.width, header.grid_h, header.grid_w);
    let correct = recs
        .iter()
        .filter(|r| {
            let pred = r.logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|p| p.0);
            pred == r.label_index()
        })
        .count();
    println!("surrogate accuracy on {} records: {:.3}", recs.len(), correct as f64 / recs.len() as f64);
    for l in 0..header.n_layers as usize {
        let norm: f64 = recs[0].layer_f64(l).iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("  layer {l}: ‖h‖ = {norm:.2}");
    }
    Ok(())
}
