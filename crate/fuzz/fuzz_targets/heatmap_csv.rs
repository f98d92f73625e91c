#![no_main]
use delta_attn::{DenseMatrix, ScoreMatrix};
use delta_attn_harness::heatmap::{exactness_csv, parse_exactness_csv, parse_scores_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_scores_csv(text);
    if let Ok((rows, cols, flags)) = parse_exactness_csv(text) {
        let map = ScoreMatrix::new(DenseMatrix::zeros(rows, cols), flags.clone()).unwrap();
        assert_eq!(
            parse_exactness_csv(&exactness_csv(&map)).unwrap(),
            (rows, cols, flags)
        );
    }
});
