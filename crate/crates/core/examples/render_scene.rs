// SPDX-License-Identifier: MIT OR Apache-2.0

//! Samples one scene per task type and writes the rendered PNGs.

use visual_circuits::svr::{render::encode_png, render_scene, sample_scene, Difficulty, GeneratorConfig, TaskType, Vocabulary};

fn main() -> anyhow::Result<()> {
    let gen = GeneratorConfig::default();
    let vocab = Vocabulary::default();
    let out = std::path::Path::new("scenes");
    std::fs::create_dir_all(out)?;
    for (i, task) in TaskType::ALL.into_iter().enumerate() {
        let scene = sample_scene(42 + i as u64, task, Difficulty::Medium, &gen)?;
        let path = out.join(format!("{task:?}.png").to_lowercase());
        std::fs::write(&path, encode_png(&render_scene(&scene, &vocab)?)?)?;
        println!("{task:?}: {} objects -> {}", scene.objects.len(), path.display());
    }
    Ok(())
}
