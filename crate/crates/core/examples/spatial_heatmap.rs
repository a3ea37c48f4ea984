// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-patch activation maps of the strongest pattern feature, written as PNGs.

mod common;

use common::LAYER;
use visual_circuits::circuits::spatial_map;
use visual_circuits::harness::report::plot_heatmap;
use visual_circuits::svr::TaskType;

fn main() -> anyhow::Result<()> {
    let fx = common::fixture(1000, 20, 800)?;
    let feature = fx.pattern.indices[0];
    let out = std::path::Path::new("heatmaps");
    for (ex, rec) in fx.train.iter().zip(&fx.train_recs).filter(|(e, _)| e.task_type == TaskType::Pattern).take(3) {
        let map = spatial_map(rec, &fx.sae, feature, LAYER)?;
        let path = out.join(format!("{}_f{feature}.png", ex.id));
        plot_heatmap(&map, &path)?;
        let peak = map.values.iter().cloned().fold(0.0, f64::max);
        println!("{} peak {peak:.3} -> {}", ex.id, path.display());
    }
    Ok(())
}
