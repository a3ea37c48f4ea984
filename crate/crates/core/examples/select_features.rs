// SPDX-License-Identifier: MIT OR Apache-2.0

//! Selectivity scores for the pattern and global contrasts, and the feature
//! sets they induce.

mod common;

use visual_circuits::circuits::{compute_selectivity, random_control, DEFAULT_EPS};
use visual_circuits::geometry::coactivation;
use visual_circuits::svr::TaskType;

fn main() -> anyhow::Result<()> {
    let fx = common::fixture(1000, 50, 800)?;
    let positive: Vec<bool> = fx.train.iter().map(|e| e.task_type == TaskType::Pattern).collect();
    let table = compute_selectivity(&fx.codes, &positive, DEFAULT_EPS)?;
    let mut ranked: Vec<(usize, f64)> = table.sigmas().into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("top pattern-selective features ({} positives, {} negatives):", table.n_pos, table.n_neg);
    for &(j, s) in ranked.iter().take(5) {
        let f = &table.features[j];
        println!("  f{j:<4} sigma {s:6.2}  mu+ {:.3}  mu- {:.3}", f.mu_pos, f.mu_neg);
    }
    for s in [&fx.pattern, &fx.global, &fx.union] {
        println!("{:<8} {:>3} features ({:.2}% of m) rule {}", s.kind.to_string(), s.len(), 100.0 * s.fraction_of(fx.sae.m), s.rule);
    }
    let random = random_control(fx.union.len(), fx.sae.m, 0)?;
    println!("random control: {:?}", random.indices);
    if let Some(p) = coactivation(&fx.codes, &fx.pattern, &fx.global) {
        println!("P(global active | pattern active) = {p:.3}");
    }
    Ok(())
}
