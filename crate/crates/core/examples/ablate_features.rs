// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-ablation flip rates for each feature set and a size-matched random set.

mod common;

use common::LAYER;
use visual_circuits::circuits::random_control;
use visual_circuits::intervention::{zero_ablation_fliprate, EvalSet};

fn main() -> anyhow::Result<()> {
    let fx = common::fixture(1000, 600, 800)?;
    let set = EvalSet::build(&fx.model, &fx.test_inputs, &fx.sae, LAYER)?;
    let random = random_control(fx.union.len(), fx.sae.m, 0)?;
    println!("set            size  fraction  flips");
    for fs in [&fx.pattern, &fx.global, &fx.union, &random] {
        let r = zero_ablation_fliprate(&set, &fx.model, &fx.sae, fs, LAYER)?;
        println!("{:<14} {:>4}  {:.4}    {:.2}%", r.kind.to_string(), r.set_size, r.dictionary_fraction, r.flip_pct);
    }
    Ok(())
}
