mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use common::{apply, mutations, Mutation};
use dploda::data::{gen_shapes_dataset, LabeledDataset, Style};
use dploda::io::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use dploda::nn::ParamStore;
use dploda::{rng, Error, Tensor};
use proptest::prelude::*;

const CASES: usize = 1000;

/// Replaces the trailing checksum so the mutation reaches the parser.
fn reseal(mut bytes: Vec<u8>) -> Vec<u8> {
    if bytes.len() >= 4 {
        bytes.truncate(bytes.len() - 4);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
    }
    bytes
}

fn sample_dataset() -> LabeledDataset {
    gen_shapes_dataset(Style::Private, 3, 4, 9).unwrap()
}

fn sample_store() -> (ParamStore<f32>, BTreeMap<String, u64>) {
    let mut r = rng::seeded(3);
    let mut s = ParamStore::new();
    s.insert("down.0.conv.weight", Tensor::randn([4, 2, 3, 3], &mut r), false)
        .unwrap();
    s.insert("down.0.conv.bias", Tensor::randn([4], &mut r), false).unwrap();
    s.insert("down.0.conv.loda_a", Tensor::randn([2, 2, 3, 3], &mut r), true)
        .unwrap();
    s.insert("down.0.conv.loda_b", Tensor::randn([4, 2, 1, 1], &mut r), true)
        .unwrap();
    let meta = BTreeMap::from([("dp_steps".to_string(), 17u64), ("mode".to_string(), 0)]);
    (s, meta)
}

/// Runs `decode` over every mutation, raw and re-sealed. Truncations must
/// fail; flips must fail or decode to a value passing `valid`. Panics are
/// caught and counted.
fn fuzz<T>(
    bytes: &[u8],
    seed: u64,
    decode: impl Fn(&[u8]) -> dploda::Result<T>,
    valid: impl Fn(&T) -> bool,
) -> (usize, usize) {
    let mut errors = 0;
    let mut crashes = 0;
    for (k, m) in mutations(bytes.len(), CASES, seed).iter().enumerate() {
        let raw = apply(bytes, m);
        let mutated = if k % 4 < 2 { raw } else { reseal(raw) };
        match catch_unwind(AssertUnwindSafe(|| decode(&mutated))) {
            Err(_) => crashes += 1,
            Ok(Err(e)) => {
                assert!(!matches!(e, Error::Io { .. }), "unexpected error kind: {e}");
                assert!(!e.to_string().is_empty());
                errors += 1;
            }
            Ok(Ok(v)) => {
                assert!(matches!(m, Mutation::FlipBit(..)), "truncated input decoded");
                assert!(valid(&v), "flip decoded to an invalid value");
            }
        }
    }
    (errors, crashes)
}

#[test]
fn dataset_fuzz() {
    let bytes = encode_dataset(&sample_dataset());
    let (errors, crashes) = fuzz(&bytes, 1, decode_dataset, |d| {
        d.labels.len() == d.images.shape()[0] && d.labels.iter().all(|&l| l < d.num_classes)
    });
    assert_eq!(crashes, 0);
    assert!(errors >= CASES / 2, "only {errors} structured errors");
}

#[test]
fn checkpoint_fuzz() {
    let (s, meta) = sample_store();
    let bytes = encode_checkpoint(&s, &meta, false).unwrap();
    let (errors, crashes) = fuzz(&bytes, 2, decode_checkpoint::<f32>, |c| {
        c.store
            .iter()
            .all(|(_, p)| p.tensor.numel() > 0 || p.tensor.ndim() == 0)
    });
    assert_eq!(crashes, 0);
    assert!(errors >= CASES / 2, "only {errors} structured errors");
}

#[test]
fn every_raw_flip_fails_the_checksum() {
    let bytes = encode_dataset(&sample_dataset());
    for i in 0..bytes.len() {
        let m = Mutation::FlipBit(i, (i % 8) as u8);
        assert!(decode_dataset(&apply(&bytes, &m)).is_err(), "flip at byte {i} accepted");
    }
}

#[test]
fn oversized_dimensions_do_not_allocate() {
    let bytes = encode_dataset(&sample_dataset());
    let mut big = bytes.clone();
    big[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    big[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode_dataset(&reseal(big)), Err(Error::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trip(n in 1usize..6, k in 2usize..5, size in 2usize..6, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let images = Tensor::<f32>::rand_uniform([n * k, 1, size, size], -1.0, 1.0, &mut r);
        let labels = (0..n * k).map(|i| i % k).collect();
        let d = LabeledDataset::new(images, labels, k).unwrap();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back.labels, &d.labels);
        prop_assert_eq!(back.num_classes, k);
        prop_assert!(back.images.max_abs_diff(&d.images) <= 1.0 / 255.0 + 1e-6);
        prop_assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), steps in any::<u64>()) {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![values.len()], values.clone()).unwrap(), true).unwrap();
        s.insert("frozen", Tensor::full([2, 2], 0.25f32), false).unwrap();
        let meta = BTreeMap::from([("dp_steps".to_string(), steps)]);
        let full = decode_checkpoint::<f32>(&encode_checkpoint(&s, &meta, false).unwrap()).unwrap();
        prop_assert_eq!(full.store.tensor("w").unwrap().data(), &values[..]);
        prop_assert_eq!(full.meta.get("dp_steps"), Some(&steps));
        prop_assert!(full.store.contains("frozen"));
        let only = decode_checkpoint::<f32>(&encode_checkpoint(&s, &meta, true).unwrap()).unwrap();
        prop_assert!(!only.store.contains("frozen"));
        prop_assert_eq!(only.store.tensor("w").unwrap().data(), &values[..]);
    }
}
