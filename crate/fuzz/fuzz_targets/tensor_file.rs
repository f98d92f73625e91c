#![no_main]
use delta_attn_harness::tensor_file::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(encode(&t), data);
        let _ = t.unstack();
    }
});
