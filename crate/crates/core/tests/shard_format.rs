// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use visual_circuits::activation::{read_index, read_shard, write_shard, ActivationRecord, ShardHeader, ShardReader, TokenRoleMask};
use visual_circuits::Error;

#[derive(Debug, Clone)]
struct Shape {
    n_layers: usize,
    grid: (usize, usize),
    text: usize,
    width: usize,
}

impl Shape {
    fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + self.text
    }
}

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..5, 1usize..5, 1usize..5, 0usize..6, 1usize..24).prop_map(|(n_layers, gh, gw, text, width)| Shape {
        n_layers,
        grid: (gh, gw),
        text,
        width,
    })
}

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        any::<f32>().prop_filter("finite", |v| v.is_finite()),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE / 2.0),
        Just(f32::MAX),
    ]
}

fn records(s: Shape) -> impl Strategy<Value = (Shape, Vec<ActivationRecord>)> {
    let len = s.n_layers * s.n_tokens() * s.width;
    let rec = (
        "[a-z0-9_]{0,12}",
        prop::option::of(b'A'..=b'Z'),
        prop::collection::vec(finite_f32(), 0..14),
        prop::collection::vec(finite_f32(), len),
    );
    let s2 = s.clone();
    prop::collection::vec(rec, 0..5).prop_map(move |rs| {
        let mask = TokenRoleMask::new(s2.n_tokens(), s2.grid).unwrap();
        let recs = rs
            .into_iter()
            .map(|(id, label, logits, states)| ActivationRecord {
                id,
                label,
                logits,
                mask: mask.clone(),
                n_layers: s2.n_layers,
                states,
            })
            .collect();
        (s2.clone(), recs)
    })
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn write_then_read_is_bit_exact((s, recs) in shape().prop_flat_map(records)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.shard");
        let header = ShardHeader::new(s.n_layers, s.n_tokens(), s.width, s.grid);
        let index = write_shard(&path, header.clone(), &recs).unwrap();
        let (h2, back) = read_shard(&path).unwrap();
        prop_assert_eq!(h2, header);
        prop_assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(bits(&a.logits), bits(&b.logits));
            prop_assert_eq!(bits(&a.states), bits(&b.states));
            prop_assert_eq!(&a.mask, &b.mask);
        }
        prop_assert_eq!(read_index(&path).unwrap(), index.clone());

        // Random access through the index lands on the same records.
        let mut reader = ShardReader::open(&path).unwrap();
        for (entry, rec) in index.iter().zip(&recs).rev() {
            let got = reader.read_at(entry.offset).unwrap();
            prop_assert_eq!(&got.id, &rec.id);
            prop_assert_eq!(bits(&got.states), bits(&rec.states));
        }
    }

    #[test]
    fn any_truncation_is_a_format_error((s, recs) in shape().prop_flat_map(records), cut in 0.0f64..1.0) {
        prop_assume!(!recs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.shard");
        write_shard(&path, ShardHeader::new(s.n_layers, s.n_tokens(), s.width, s.grid), &recs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let keep = ((bytes.len() as f64 * cut) as usize).min(bytes.len() - 1);
        let index = read_index(&path).unwrap();
        // Cuts that land exactly on a record boundary leave a valid, shorter shard.
        prop_assume!(!index.iter().any(|e| e.offset as usize == keep));
        std::fs::write(&path, &bytes[..keep]).unwrap();
        match read_shard(&path) {
            Err(Error::Format { .. }) => {}
            other => prop_assert!(false, "expected a format error, got {:?}", other.map(|r| r.1.len())),
        }
    }
}

#[test]
fn record_with_wrong_state_length_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let header = ShardHeader::new(2, 3, 4, (1, 2));
    let rec = ActivationRecord {
        id: "bad".into(),
        label: None,
        logits: vec![],
        mask: TokenRoleMask::new(3, (1, 2)).unwrap(),
        n_layers: 2,
        states: vec![0.0; 2 * 3 * 4 - 1],
    };
    assert!(write_shard(&dir.path().join("b.shard"), header, &[rec]).is_err());
}
