#![no_main]

use hfmca::oracle::{exact_decompose, JointTable};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = JointTable::parse_csv(text) {
        let total: f64 = t.px().iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "accepted table sums to {total}");
        if t.px().len() * t.py().len() <= 4096 {
            let _ = exact_decompose(&t);
        }
    }
});
