// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scales a feature set inside image tokens, calibrates a second set to the
//! same perturbation size and sweeps the scale.

mod common;

use common::LAYER;
use visual_circuits::intervention::{
    calibrate_norm_match, evaluate_run, scale_grid, scale_sweep, CalibrationGrid, EvalSet, InterventionSpec,
};

fn main() -> anyhow::Result<()> {
    let fx = common::fixture(1000, 600, 800)?;
    let set = EvalSet::build(&fx.model, &fx.test_inputs, &fx.sae, LAYER)?;

    for (fs, lambda) in [(&fx.pattern, 2.0), (&fx.pattern, 0.0), (&fx.union, 2.0), (&fx.union, 0.0)] {
        let m = evaluate_run(&set, &fx.model, &fx.sae, &InterventionSpec::new(fs.clone(), lambda, LAYER), None)?;
        println!(
            "{:<8} λ={lambda:<4} base {:.3}  Δpp {:+6.2}  chg {:5.2}%  rel {:.4}",
            fs.kind.to_string(),
            m.base_acc,
            m.delta_pp,
            m.chg_pct,
            m.rel_perturbation
        );
    }

    let reference = InterventionSpec::new(fx.pattern.clone(), 2.0, LAYER);
    let cal = calibrate_norm_match(&set, &fx.sae, &reference, &fx.union, &CalibrationGrid::default())?;
    println!(
        "\nunion matched to pattern@2: λ* = {:.2} (rel {:.4} vs {:.4}, {} grid points)",
        cal.lambda, cal.target_rel, cal.reference_rel, cal.evaluated.len()
    );

    println!("\nscale sweep of the pattern set:");
    for r in scale_sweep(&set, &fx.model, &fx.sae, &reference, &scale_grid(0.2, 2.0, 0.2))? {
        println!("  s={:.1}  Δpp {:+6.2}  drift {:5.2}%", r.scale, r.delta_pp, r.drift);
    }
    Ok(())
}
