//! Stable-toolchain companion to the fuzz targets: the checked-in corpus and
//! random mutations of it go through every decoder, which must return errors
//! rather than panic and must round-trip whatever they accept.

use std::path::PathBuf;

use hfmca::checkpoint::Checkpoint;
use hfmca::hierarchy::{encode_cifar10, parse_cifar10};
use hfmca::oracle::JointTable;
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut seeds: Vec<Vec<u8>> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty());
    seeds
}

fn checkpoint_property(data: &[u8]) {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode().unwrap(), bytes);
    }
}

fn cifar_property(data: &[u8]) {
    if let Ok(d) = parse_cifar10(data) {
        assert_eq!(encode_cifar10(&d).unwrap(), data);
    }
}

fn csv_property(data: &[u8]) {
    if let Ok(t) = std::str::from_utf8(data).map_err(drop).and_then(|s| JointTable::parse_csv(s).map_err(drop)) {
        let total: f64 = t.px().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

/// Overwrites, inserts or truncates at positions chosen by `edits`.
fn mutate(seed: &[u8], edits: &[(usize, u8, u8)]) -> Vec<u8> {
    let mut out = seed.to_vec();
    for &(pos, byte, kind) in edits {
        if out.is_empty() {
            out.push(byte);
            continue;
        }
        let p = pos % out.len();
        match kind % 3 {
            0 => out[p] = byte,
            1 => out.insert(p, byte),
            _ => out.truncate(p),
        }
    }
    out
}

#[test]
fn corpus_seeds_behave() {
    let ck = corpus("checkpoint");
    assert!(ck.iter().any(|s| Checkpoint::decode(s).is_ok()), "one checkpoint seed is valid");
    ck.iter().for_each(|s| checkpoint_property(s));
    let cifar = corpus("cifar");
    assert!(cifar.iter().any(|s| parse_cifar10(s).is_ok()));
    cifar.iter().for_each(|s| cifar_property(s));
    corpus("joint_csv").iter().for_each(|s| csv_property(s));
}

fn edits() -> impl Strategy<Value = Vec<(usize, u8, u8)>> {
    prop::collection::vec((any::<usize>(), any::<u8>(), any::<u8>()), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mutated_checkpoints(i in 0usize..8, e in edits()) {
        let seeds = corpus("checkpoint");
        checkpoint_property(&mutate(&seeds[i % seeds.len()], &e));
    }

    #[test]
    fn mutated_cifar(i in 0usize..8, e in edits()) {
        let seeds = corpus("cifar");
        cifar_property(&mutate(&seeds[i % seeds.len()], &e));
    }

    #[test]
    fn mutated_csv(i in 0usize..8, e in edits()) {
        let seeds = corpus("joint_csv");
        csv_property(&mutate(&seeds[i % seeds.len()], &e));
    }

    #[test]
    fn arbitrary_bytes(data in prop::collection::vec(any::<u8>(), 0..512)) {
        checkpoint_property(&data);
        cifar_property(&data);
        csv_property(&data);
    }
}
