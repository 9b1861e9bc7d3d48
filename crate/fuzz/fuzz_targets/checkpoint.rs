#![no_main]

use hfmca::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

// Anything that decodes must survive an encode/decode round trip unchanged.
fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode().unwrap(), bytes);
    }
});
