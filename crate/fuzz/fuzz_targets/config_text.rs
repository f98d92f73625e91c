#![no_main]
use delta_attn_harness::{parse_config_text, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(layer) = parse_config_text(text) {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&layer);
        let _ = cfg.validate();
    }
});
