#![no_main]
use delta_attn_harness::cache_file::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cache) = decode(data) {
        assert!(cache.validate().is_ok());
        assert_eq!(decode(&encode(&cache)).unwrap(), cache);
    }
});
