#![no_main]

use hfmca::hierarchy::{encode_cifar10, parse_cifar10};
use libfuzzer_sys::fuzz_target;

// Byte pixels are exact multiples of 1/255, so a parsed file re-encodes to
// the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(d) = parse_cifar10(data) {
        assert_eq!(encode_cifar10(&d).unwrap(), data);
    }
});
