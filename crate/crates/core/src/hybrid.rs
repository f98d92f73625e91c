//! Context-aware hybrid attention.
//!
//! Prefill: scores inside square blocks of side `w` along the diagonal are
//! computed exactly; everything below those blocks comes from the delta
//! recursion over the key encoding. Decode: the last `w_d` cached positions
//! (the current token included) are exact, older ones use the cached deltas.

use serde::{Deserialize, Serialize};

use crate::delta::{build_delta_encoding, element_sparsity, ConstructionStrategy, Direction};
use crate::delta_matmul::{
    delta_score_columns, score_recursion, Exactness, MacCounter, ScoreMatrix,
};
use crate::error::{Error, Result};
use crate::kv_cache::DeltaKVCache;
use crate::metrics::{AttentionReport, MacBreakdown, Stage};
use crate::tensor::{
    dot, matmul, row_softmax, score_scale, softmax_in_place, weighted_sum, CausalMask, DenseMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub theta: f32,
    /// Fraction of the prompt length used as the prefill window, in (0, 1).
    pub gamma: f64,
    pub w_max: usize,
    pub w_d: usize,
    pub strategy: ConstructionStrategy,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            theta: 0.1,
            gamma: 0.1,
            w_max: 64,
            w_d: 4,
            strategy: ConstructionStrategy::TopDownKey,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    Ok(())
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.theta.is_finite() || self.theta < 0.0 {
            return Err(Error::Config(format!(
                "theta must be finite and >= 0, got {}",
                self.theta
            )));
        }
        check_gamma(self.gamma)?;
        if self.w_max == 0 {
            return Err(Error::Config("w_max must be >= 1".into()));
        }
        if self.w_d == 0 {
            return Err(Error::Config("w_d must be >= 1".into()));
        }
        Ok(())
    }
}

/// Prefill window `min(floor(gamma·n), w_max)`, never below 1.
///
/// The product is nudged by a relative 1e-9 before flooring so that decimal
/// inputs such as `0.29 · 100` land on the integer they denote.
pub fn prefill_window(n: usize, gamma: f64, w_max: usize) -> Result<usize> {
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::shape("prefill_window", "sequence length 0"));
    }
    if w_max == 0 {
        return Err(Error::Config("w_max must be >= 1".into()));
    }
    let x = gamma * n as f64;
    let w = (x + x * 1e-9).floor() as usize;
    Ok(w.min(w_max).max(1))
}

/// Entry kind for query `i`, key `j` under block size `w`.
pub fn jigsaw_membership(i: usize, j: usize, w: usize) -> Exactness {
    assert!(w >= 1, "window must be >= 1");
    if j > i {
        Exactness::Masked
    } else if i / w == j / w {
        Exactness::Full
    } else {
        Exactness::Approximate
    }
}

/// `s_m · (1 − window/n)`; 0 when the window covers more than `n`.
/// A window of 0 (no exact region) returns `s_m`.
pub fn computational_sparsity(s_m: f32, window: usize, n: usize) -> f32 {
    if window > n || n == 0 {
        return 0.0;
    }
    s_m * (1.0 - window as f32 / n as f32)
}

#[derive(Debug, Clone)]
pub struct PrefillResult {
    pub output: DenseMatrix,
    /// Scaled pre-softmax scores; masked entries hold 0.
    pub scores: ScoreMatrix,
    /// Present for the production key-delta path only.
    pub cache: Option<DeltaKVCache>,
    pub report: AttentionReport,
}

fn check_qkv(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<usize> {
    let n = q.rows();
    if n == 0 {
        return Err(Error::shape("prefill", "empty sequence"));
    }
    if k.rows() != n || v.rows() != n {
        return Err(Error::shape(
            "prefill",
            format!("row counts q={n} k={} v={}", k.rows(), v.rows()),
        ));
    }
    if k.cols() != q.cols() || v.cols() != q.cols() {
        return Err(Error::shape(
            "prefill",
            format!("column counts q={} k={} v={}", q.cols(), k.cols(), v.cols()),
        ));
    }
    Ok(n)
}

/// Moves the basis term of a recursion count into the exact bucket.
fn split_basis(scratch: MacCounter, d: u64, macs: &mut MacBreakdown) {
    macs.exact.mac += d;
    macs.delta.mac += scratch.mac - d;
    macs.delta.skipped += scratch.skipped;
}

fn softmax_values(scores: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    let probs = row_softmax(scores, Some(CausalMask::new(scores.rows())))?;
    matmul(&probs, v)
}

/// Hybrid prefill with top-down key deltas.
pub fn prefill_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &HybridConfig,
) -> Result<PrefillResult> {
    cfg.validate()?;
    if cfg.strategy != ConstructionStrategy::TopDownKey {
        return Err(Error::Config(format!(
            "prefill runs on top-down key deltas; `{}` is ablation-only",
            cfg.strategy
        )));
    }
    let n = check_qkv(q, k, v)?;
    let d = q.cols();
    let enc = build_delta_encoding(k, cfg.theta, Direction::TopDown)?;
    let w = prefill_window(n, cfg.gamma, cfg.w_max)?;
    let scale = score_scale(d);

    let mut macs = MacBreakdown::default();
    let mut scores = DenseMatrix::zeros(n, n);
    let mut exactness = vec![Exactness::Masked; n * n];
    for i in 0..n {
        let qi = q.row(i);
        let start = (i / w) * w;
        let row = scores.row_mut(i);
        let flags = &mut exactness[i * n..(i + 1) * n];
        if start > 0 {
            let mut scratch = MacCounter::default();
            let approx = score_recursion(qi, enc.basis(), enc.columns(), start - 1, &mut scratch);
            split_basis(scratch, d as u64, &mut macs);
            for (j, s) in approx.into_iter().enumerate() {
                row[j] = s * scale;
                flags[j] = Exactness::Approximate;
            }
        }
        for j in start..=i {
            row[j] = dot(qi, k.row(j)) * scale;
            flags[j] = Exactness::Full;
        }
        macs.exact.mac += ((i + 1 - start) * d) as u64;
    }

    let output = softmax_values(&scores, v)?;
    let report = AttentionReport::new(
        Stage::Prefill,
        n,
        w,
        enc.nnz() as u64,
        enc.delta_elements() as u64,
        d as u64,
        macs,
    );
    let cache = DeltaKVCache::from_prefill(enc, k.iter_rows(), v.iter_rows(), cfg.w_d)?;
    Ok(PrefillResult {
        output,
        scores: ScoreMatrix::new(scores, exactness)?,
        cache: Some(cache),
        report,
    })
}

/// Delta-construction comparison without a full-attention window.
///
/// Every unmasked score comes from the delta recursion; only the basis
/// row (query strategies) or basis column (key strategy) is exact. The
/// full rectangle is computed, masked entries included, and no cache is
/// produced.
pub fn prefill_attention_ablation(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &HybridConfig,
) -> Result<PrefillResult> {
    cfg.validate()?;
    let n = check_qkv(q, k, v)?;
    let d = q.cols();
    let dir = cfg.strategy.direction();
    let mut counter = MacCounter::default();
    let (enc, raw) = match cfg.strategy {
        ConstructionStrategy::TopDownKey => {
            let enc = build_delta_encoding(k, cfg.theta, dir)?;
            let s = delta_score_columns(q, &enc, &mut counter)?;
            (enc, s)
        }
        ConstructionStrategy::TopDownQuery | ConstructionStrategy::BottomUpQuery => {
            let enc = build_delta_encoding(q, cfg.theta, dir)?;
            // Query deltas reuse the key kernel on swapped operands.
            let s = delta_score_columns(k, &enc, &mut counter)?;
            let exactness = transpose_flags(&s.exactness, n, n);
            (enc, ScoreMatrix::new(s.scores.transpose(), exactness)?)
        }
    };
    let scale = score_scale(d);
    let mut scores = raw.scores;
    let mut exactness = raw.exactness;
    for i in 0..n {
        for j in 0..n {
            if j > i {
                exactness[i * n + j] = Exactness::Masked;
            }
            scores.set(i, j, scores.get(i, j) * scale);
        }
    }
    let basis_macs = (n * d) as u64;
    let macs = MacBreakdown {
        exact: MacCounter {
            mac: basis_macs,
            skipped: 0,
        },
        delta: MacCounter {
            mac: counter.mac - basis_macs,
            skipped: counter.skipped,
        },
    };
    let output = softmax_values(&scores, v)?;
    let report = AttentionReport::new(
        Stage::Prefill,
        n,
        0,
        enc.nnz() as u64,
        enc.delta_elements() as u64,
        d as u64,
        macs,
    );
    debug_assert_eq!(report.s_m, element_sparsity(&enc));
    Ok(PrefillResult {
        output,
        scores: ScoreMatrix::new(scores, exactness)?,
        cache: None,
        report,
    })
}

fn transpose_flags(flags: &[Exactness], rows: usize, cols: usize) -> Vec<Exactness> {
    let mut out = vec![Exactness::Masked; flags.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = flags[i * cols + j];
        }
    }
    out
}

/// One generated token's attention.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub output: Vec<f32>,
    /// Scaled scores over all cached positions `0..=t`.
    pub scores: Vec<f32>,
    /// First position scored exactly; earlier ones used deltas.
    pub exact_from: usize,
    pub macs: MacBreakdown,
}

/// Appends the new token to `cache` and attends over the whole history.
pub fn decode_step(
    q_new: &[f32],
    k_new: &[f32],
    v_new: &[f32],
    cache: &mut DeltaKVCache,
    cfg: &HybridConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    if cfg.strategy != ConstructionStrategy::TopDownKey {
        return Err(Error::Config(format!(
            "decode requires top-down key deltas, got `{}`",
            cfg.strategy
        )));
    }
    if !cache.is_initialized() {
        return Err(Error::State("decode on an uninitialized cache".into()));
    }
    if cfg.w_d != cache.w_d() {
        return Err(Error::Config(format!(
            "config w_d {} differs from cache w_d {}",
            cfg.w_d,
            cache.w_d()
        )));
    }
    let d = cache.d_head();
    if q_new.len() != d {
        return Err(Error::shape(
            "decode_step",
            format!("query has {} elements, d_head {d}", q_new.len()),
        ));
    }
    let (delta, state) = cache.encode(k_new, cfg.theta)?;
    cache.append(delta, state, k_new, v_new)?;

    let total = cache.len();
    let exact_from = total.saturating_sub(cache.w_d());
    let mut macs = MacBreakdown::default();
    let mut scores = Vec::with_capacity(total);
    if exact_from > 0 {
        let mut scratch = MacCounter::default();
        scores = cache.delta_scores(q_new, exact_from - 1, &mut scratch)?;
        split_basis(scratch, d as u64, &mut macs);
    }
    for (p, key) in cache.exact_ring() {
        debug_assert_eq!(p, scores.len());
        scores.push(dot(q_new, key));
        macs.exact.mac += d as u64;
    }
    let scale = score_scale(d);
    scores.iter_mut().for_each(|s| *s *= scale);

    let mut probs = scores.clone();
    softmax_in_place(&mut probs)?;
    let mut output = vec![0.0f32; d];
    weighted_sum(
        &probs,
        cache.values().iter().map(Vec::as_slice),
        &mut output,
    );
    Ok(DecodeOutput {
        output,
        scores,
        exact_from,
        macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dense_attention, scaled_scores};

    #[test]
    fn window_examples() {
        assert_eq!(prefill_window(16, 0.25, 64).unwrap(), 4);
        assert_eq!(prefill_window(1000, 0.25, 64).unwrap(), 64);
        assert_eq!(prefill_window(3, 0.1, 64).unwrap(), 1);
        assert_eq!(prefill_window(100, 0.29, 64).unwrap(), 29);
    }

    #[test]
    fn window_errors() {
        assert!(matches!(prefill_window(16, 0.0, 64), Err(Error::Config(_))));
        assert!(matches!(prefill_window(16, 1.0, 64), Err(Error::Config(_))));
        assert!(matches!(
            prefill_window(16, f64::NAN, 64),
            Err(Error::Config(_))
        ));
        assert!(prefill_window(0, 0.5, 64).is_err());
        assert!(prefill_window(4, 0.5, 0).is_err());
    }

    #[test]
    fn jigsaw_examples() {
        assert_eq!(jigsaw_membership(5, 2, 4), Exactness::Approximate);
        assert_eq!(jigsaw_membership(5, 4, 4), Exactness::Full);
        assert_eq!(jigsaw_membership(2, 5, 4), Exactness::Masked);
        for i in 0..6 {
            for j in 0..=i {
                assert_eq!(jigsaw_membership(i, j, 6), Exactness::Full);
                let diag = if i == j {
                    Exactness::Full
                } else {
                    Exactness::Approximate
                };
                assert_eq!(jigsaw_membership(i, j, 1), diag);
            }
        }
    }

    #[test]
    fn sparsity_formula() {
        assert_eq!(computational_sparsity(0.8, 4, 16), 0.6);
        assert_eq!(computational_sparsity(0.8, 16, 16), 0.0);
        assert_eq!(computational_sparsity(0.8, 17, 16), 0.0);
        assert_eq!(computational_sparsity(0.8, 0, 16), 0.8);
    }

    #[test]
    fn config_validation() {
        let ok = HybridConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            HybridConfig { theta: -1.0, ..ok },
            HybridConfig { gamma: 1.5, ..ok },
            HybridConfig { w_max: 0, ..ok },
            HybridConfig { w_d: 0, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn small_qkv() -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let q = DenseMatrix::from_rows(&[
            [0.5, -1.0],
            [1.0, 0.25],
            [-0.75, 0.5],
            [0.1, 0.9],
            [1.2, -0.3],
        ])
        .unwrap();
        let k = DenseMatrix::from_rows(&[
            [1.0, 0.0],
            [1.05, 0.1],
            [1.3, 0.1],
            [1.3, -0.4],
            [0.2, -0.4],
        ])
        .unwrap();
        let v =
            DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0], [3.0, -1.0], [0.5, 0.5], [-2.0, 1.0]])
                .unwrap();
        (q, k, v)
    }

    #[test]
    fn zero_threshold_matches_oracle() {
        let (q, k, v) = small_qkv();
        let cfg = HybridConfig {
            theta: 0.0,
            gamma: 0.25,
            ..Default::default()
        };
        let r = prefill_attention(&q, &k, &v, &cfg).unwrap();
        let oracle = dense_attention(&q, &k, &v, true).unwrap();
        assert!(r.output.max_abs_diff(&oracle).unwrap() <= 1e-5);
        assert_eq!(r.report.window, 1);
    }

    #[test]
    fn full_entries_are_bit_exact() {
        let (q, k, v) = small_qkv();
        let cfg = HybridConfig {
            theta: 0.2,
            gamma: 0.5,
            ..Default::default()
        };
        let r = prefill_attention(&q, &k, &v, &cfg).unwrap();
        let exact = scaled_scores(&q, &k).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let flag = r.scores.flag(i, j);
                assert_eq!(flag, jigsaw_membership(i, j, 2));
                if flag == Exactness::Full || j == 0 {
                    assert_eq!(
                        r.scores.scores.get(i, j).to_bits(),
                        exact.get(i, j).to_bits()
                    );
                }
            }
        }
        let total_unmasked = 15 * 2;
        assert_eq!(r.report.mac_used + r.report.mac_skipped, total_unmasked);
    }

    #[test]
    fn prefill_rejects_ablation_strategy() {
        let (q, k, v) = small_qkv();
        let cfg = HybridConfig {
            strategy: ConstructionStrategy::BottomUpQuery,
            ..Default::default()
        };
        assert!(matches!(
            prefill_attention(&q, &k, &v, &cfg),
            Err(Error::Config(_))
        ));
        assert!(prefill_attention_ablation(&q, &k, &v, &cfg).is_ok());
    }

    #[test]
    fn prefill_shape_errors() {
        let (q, _, v) = small_qkv();
        let cfg = HybridConfig::default();
        let short = DenseMatrix::zeros(4, 2);
        assert!(prefill_attention(&q, &short, &v, &cfg).is_err());
        let empty = DenseMatrix::zeros(0, 2);
        assert!(prefill_attention(&empty, &empty, &empty, &cfg).is_err());
    }

    #[test]
    fn prefill_cache_holds_window() {
        let (q, k, v) = small_qkv();
        let cfg = HybridConfig {
            w_d: 3,
            ..Default::default()
        };
        let cache = prefill_attention(&q, &k, &v, &cfg).unwrap().cache.unwrap();
        assert_eq!(cache.len(), 5);
        let ring: Vec<usize> = cache.exact_ring().map(|(p, _)| p).collect();
        assert_eq!(ring, vec![2, 3, 4]);
        assert!(cache.validate().is_ok());
    }

    #[test]
    fn decode_inside_window_matches_dense() {
        let (q, k, v) = small_qkv();
        let cfg = HybridConfig {
            theta: 0.5,
            w_d: 8,
            ..Default::default()
        };
        let mut cache = DeltaKVCache::init(k.row(0), v.row(0), 8).unwrap();
        for t in 1..5 {
            let out = decode_step(q.row(t), k.row(t), v.row(t), &mut cache, &cfg).unwrap();
            assert_eq!(out.exact_from, 0);
            let qt = DenseMatrix::new(1, 2, q.row(t).to_vec()).unwrap();
            let kk =
                DenseMatrix::from_rows(&(0..=t).map(|p| k.row(p)).collect::<Vec<_>>()).unwrap();
            let vv =
                DenseMatrix::from_rows(&(0..=t).map(|p| v.row(p)).collect::<Vec<_>>()).unwrap();
            let oracle = dense_attention(&qt, &kk, &vv, false).unwrap();
            assert_eq!(oracle.row(0), out.output.as_slice());
        }
    }

    #[test]
    fn decode_errors() {
        let cfg = HybridConfig::default();
        let mut empty = DeltaKVCache::empty(2, cfg.w_d).unwrap();
        assert!(matches!(
            decode_step(&[0.0; 2], &[0.0; 2], &[0.0; 2], &mut empty, &cfg),
            Err(Error::State(_))
        ));
        let mut cache = DeltaKVCache::init(&[0.0; 2], &[0.0; 2], cfg.w_d).unwrap();
        let ablation = HybridConfig {
            strategy: ConstructionStrategy::TopDownQuery,
            ..cfg
        };
        assert!(matches!(
            decode_step(&[0.0; 2], &[0.0; 2], &[0.0; 2], &mut cache, &ablation),
            Err(Error::Config(_))
        ));
        let other_window = HybridConfig { w_d: 9, ..cfg };
        assert!(decode_step(&[0.0; 2], &[0.0; 2], &[0.0; 2], &mut cache, &other_window).is_err());
        assert_eq!(cache.len(), 1);
    }
}
