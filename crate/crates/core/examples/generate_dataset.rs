// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generates the three splits (JSONL plus PNGs) and validates them.
//!
//! `cargo run --release --example generate_dataset -- [out_dir] [train] [val] [test]`

use std::path::PathBuf;

use visual_circuits::svr::{generate_split, validate_split, GeneratorConfig, SplitName, Vocabulary};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("svr_data", String::as_str));
    let size = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let sizes = [size(1, 600), size(2, 150), size(3, 150)];

    let gen = GeneratorConfig::default();
    let vocab = Vocabulary::default();
    for (split, n) in SplitName::ALL.into_iter().zip(sizes) {
        let s = generate_split(&gen, split, 1000 + split as u64, n, &out, true)?;
        let report = validate_split(&out.join(split.jsonl_name()), &vocab)?;
        println!(
            "{split}: {} records, {} mismatches, {} parse failures",
            s.records.len(),
            report.mismatches,
            report.parse_failures
        );
    }
    let first = &visual_circuits::svr::read_jsonl(&out.join(SplitName::Train.jsonl_name()))?[0];
    println!("\n{} [{:?}/{:?}]\n{}", first.id, first.task_type, first.difficulty, first.question);
    for (i, o) in first.options.iter().enumerate() {
        println!("  {}. {o}", (b'A' + i as u8) as char);
    }
    println!("answer: {}  image: {}", first.answer, out.join(&first.image).display());
    Ok(())
}
