//! Config documents from the fuzz corpus, and mutations of them, parse or
//! fail cleanly; resolved configs survive a serialize/parse round trip.

use std::path::PathBuf;

use hfmca_cli::config::RunConfig;
use proptest::prelude::*;

fn seeds() -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config_json");
    let mut out: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| std::fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    out
}

fn property(text: &str) {
    if let Ok(resolved) = RunConfig::parse(text).and_then(|c| c.resolve(None)) {
        let json = serde_json::to_string(&resolved).unwrap();
        assert_eq!(RunConfig::parse(&json).unwrap().resolve(None).unwrap(), resolved);
    }
}

#[test]
fn every_seed_resolves() {
    for s in seeds() {
        RunConfig::parse(&s).and_then(|c| c.resolve(None)).unwrap_or_else(|e| panic!("{s}: {e}"));
        property(&s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mutated_documents(i in 0usize..8, cut in any::<usize>(), insert in "[{}\\[\\]:,\"0-9a-z.-]{0,4}") {
        let all = seeds();
        let s = &all[i % all.len()];
        let mut at = cut % (s.len() + 1);
        while !s.is_char_boundary(at) {
            at -= 1;
        }
        property(&format!("{}{insert}{}", &s[..at], &s[at..]));
    }
}
