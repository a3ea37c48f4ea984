// SPDX-License-Identifier: MIT OR Apache-2.0

//! Drives the staged pipeline from code on a reduced config. The `svtc`
//! binary does the same from the command line.

use visual_circuits::harness::{ExperimentConfig, Pipeline, Stage};

fn main() -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.train = 500;
    cfg.dataset.val = 150;
    cfg.dataset.test = 300;
    cfg.extract.train = 500;
    cfg.extract.val = 150;
    cfg.extract.test = 300;
    cfg.probe.seeds = 2;
    cfg.sae.extra_layers = vec![4];
    cfg.sae.train.steps = 400;
    cfg.intervention.bootstrap.n = 200;
    cfg.intervention.subsample_sizes = vec![100, 200];
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());

    let mut p = Pipeline::new(cfg, Some(out.into()), true)?;
    let manifest = p.run(&Stage::ALL)?;
    for (stage, rec) in &manifest.stages {
        println!("{stage:<10} {:>6.2}s  {} artifacts", rec.seconds, rec.outputs.len());
    }
    println!("tables in {}", p.out_dir().join("reports").display());
    Ok(())
}
