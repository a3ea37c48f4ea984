// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interference between the pattern and global directions, LayerNorm noise
//! amplification, attention entropy, curvature drift and OSP composition.

mod common;

use common::LAYER;
use visual_circuits::geometry::{
    attention_entropy_probe, curvature_drift_error, interference_report, layernorm_amplification_sim, mean_effective_direction,
    osp_compose, pairwise_alignment, EntropyConfig, LnSimConfig,
};
use visual_circuits::linalg::{random_orthonormal, Matrix};
use visual_circuits::seed::rng_str;

fn main() -> anyhow::Result<()> {
    let fx = common::fixture(1000, 20, 800)?;
    let r = interference_report(&fx.codes, &fx.sae, &fx.pattern, &fx.global)?;
    println!("rho {:+.3}  negative pairs {:.2}  ‖a+b‖/(‖a‖+‖b‖) {:.3}", r.rho, r.fraction_negative, r.union_norm_ratio);
    let al = pairwise_alignment(&fx.sae, &fx.pattern, &fx.global, 10)?;
    println!("{} decoder pairs, histogram {:?}", al.pairs, al.histogram);

    let dp = mean_effective_direction(&fx.codes, &fx.sae, &fx.pattern)?;
    let dg = mean_effective_direction(&fx.codes, &fx.sae, &fx.global)?;
    let u = osp_compose(&dp.delta, &dg.delta)?;
    println!("OSP union norm {:.3} (pattern {:.3}, global {:.3})", visual_circuits::linalg::norm(&u), dp.norm, dg.norm);

    let d = fx.sae.d;
    let dir = random_orthonormal(1, d, &mut rng_str(0, "dir")).row(0).to_vec();
    let ln = layernorm_amplification_sim(&dir, &[1e-3, 1e-2, 1e-1], &LnSimConfig { dim: d, ..Default::default() })?;
    println!("LayerNorm NSR slope in log-log: {:.3}", ln.slope);

    let w = Matrix::gaussian(16, d, 1.0 / (d as f64).sqrt(), &mut rng_str(0, "w"));
    for (s, h) in attention_entropy_probe(&w, &w, &dir, &[0.0, 4.0, 16.0], &EntropyConfig::default())? {
        println!("signal {s:>4}: attention entropy {h:.3} (max {:.3})", 16f64.ln());
    }

    let h0 = fx.train_recs[0].layer_f64(LAYER)[..d].to_vec();
    let c = curvature_drift_error(|h| fx.model.block_map(LAYER + 1, h), &h0, fx.sae.feature(fx.pattern.indices[0]), &[1e-3, 1e-2, 1e-1])?;
    println!("curvature drift slope {:.2}, R² {:.4}", c.slope, c.r2);
    Ok(())
}
