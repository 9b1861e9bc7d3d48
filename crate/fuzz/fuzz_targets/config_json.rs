#![no_main]

use hfmca_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// Parsing and validation reject bad documents with errors, never panics;
// a resolved config serializes back to one that resolves the same way.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::parse(text) else { return };
    if let Ok(resolved) = cfg.resolve(None) {
        let json = serde_json::to_string(&resolved).unwrap();
        let back = RunConfig::parse(&json).unwrap().resolve(None).unwrap();
        assert_eq!(back, resolved);
    }
});
