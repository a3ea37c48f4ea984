// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random and permuted controls at the calibrated union scale, then a
//! bootstrap over permutation seeds and test subsamples.

mod common;

use common::LAYER;
use visual_circuits::circuits::{live_features, permuted_control};
use visual_circuits::intervention::{
    bootstrap, norm_preserving_lambda, run_controls, BootstrapGrid, CalibrationGrid, ControlSets, EvalMetrics, EvalSet, InterventionSpec,
};

fn main() -> anyhow::Result<()> {
    let fx = common::fixture(1000, 600, 800)?;
    let set = EvalSet::build(&fx.model, &fx.test_inputs, &fx.sae, LAYER)?;
    let sets = ControlSets {
        pattern: fx.pattern.clone(),
        global: fx.global.clone(),
        union: fx.union.clone(),
        pool: live_features(&fx.codes),
    };
    let report = run_controls(&set, &fx.model, &fx.sae, &sets, LAYER, 2.0, &[0, 1, 2], &CalibrationGrid::default())?;
    for r in &report.rows {
        println!("{:<16} Δpp {:+6.2}  chg {:5.2}%  rel {:.4}", r.config, r.delta_pp, r.chg_pct, r.rel_perturbation);
    }

    // Bootstrap the permuted control: each permutation seed gets its own set.
    let union_rel = set.relative_perturbation(&fx.sae, &InterventionSpec::new(fx.union.clone(), report.union_lambda, LAYER));
    let grid = BootstrapGrid {
        n: 400,
        ..BootstrapGrid::default()
    };
    let outcomes = grid
        .perm_seeds
        .iter()
        .map(|&p| {
            let fs = permuted_control(&fx.union, &sets.pool, p)?;
            let unit = set.relative_perturbation(&fx.sae, &InterventionSpec::new(fs.clone(), 2.0, LAYER));
            let lam = norm_preserving_lambda(report.union_lambda, union_rel, unit);
            Ok((p, set.outcomes(&fx.model, &fx.sae, &InterventionSpec::new(fs, lam, LAYER))?))
        })
        .collect::<visual_circuits::Result<std::collections::HashMap<_, _>>>()?;
    let b = bootstrap(set.len(), &grid, |p, idx| Ok(EvalMetrics::aggregate(&outcomes[&p], Some(idx))))?;
    println!(
        "\npermuted control over {} runs: Δpp {:+.2} ± {:.2}, chg {:.2} ± {:.2}",
        b.runs.len(),
        b.delta_pp_mean,
        b.delta_pp_std,
        b.chg_mean,
        b.chg_std
    );
    Ok(())
}
