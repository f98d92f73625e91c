//! Experiment runner: hybrid attention per head, checked against the dense
//! oracle on the same tensors.
//!
//! Every run also re-verifies the structural guarantees (exact entries are
//! bit-identical to the oracle, approximate ones stay inside the threshold
//! bound, MAC counts cover the dense-equivalent work, reported `s_c`
//! follows from `s_m`, caches are coherent). A failure is reported as
//! [`HarnessError::Invariant`].

use delta_attn::{
    compare_rows, computational_sparsity, decode_step, dense_attention, dot, evaluate_prefill,
    merge_reports, prefill_attention, prefill_attention_ablation, scaled_scores, score_scale,
    AttentionReport, CacheMemory, ConstructionStrategy, DeltaKVCache, DenseMatrix, ErrorStats,
    Exactness, MacBreakdown, PrefillResult, ScoreMatrix, Stage,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Scenario};
use crate::error::{HarnessError, Result};
use crate::synth::HeadTensors;
use crate::tensor_file::Tensor;

#[derive(Debug, Clone)]
pub struct HeadRun {
    pub prefill: AttentionReport,
    pub decode: Option<AttentionReport>,
    /// Prefill output rows followed by one row per decode step.
    pub outputs: DenseMatrix,
    /// Scaled prefill scores with their exactness map.
    pub scores: ScoreMatrix,
    /// Final cache; absent for ablation strategies.
    pub cache: Option<DeltaKVCache>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub prefill: AttentionReport,
    pub decode: Option<AttentionReport>,
    pub heads: Vec<HeadRun>,
}

fn invariant(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Invariant(msg()))
    }
}

fn l1(x: &[f32]) -> f32 {
    x.iter().map(|v| v.abs()).sum()
}

fn max_abs(m: &DenseMatrix) -> f32 {
    m.data().iter().fold(0.0f32, |a, v| a.max(v.abs()))
}

fn leading_rows(m: &DenseMatrix, rows: usize) -> DenseMatrix {
    DenseMatrix::new(rows, m.cols(), m.data()[..rows * m.cols()].to_vec())
        .expect("row count within matrix")
}

/// Threshold bound on a scaled score plus room for f32 accumulation over
/// up to `len` terms.
struct Bound {
    theta: f32,
    scale: f32,
    rounding: f32,
}

impl Bound {
    fn new(theta: f32, d: usize, len: usize, other_max: f32) -> Self {
        let scale = score_scale(d);
        Self {
            theta,
            scale,
            rounding: 8.0 * (len + d) as f32 * f32::EPSILON * (other_max + theta),
        }
    }

    /// `l1` is the 1-norm of the vector that was not delta-encoded.
    fn holds(&self, approx: f32, exact: f64, l1: f32) -> bool {
        let limit = ((self.theta + self.rounding) * l1 * self.scale) as f64 + 1e-7;
        (approx as f64 - exact).abs() <= limit
    }
}

fn check_prefill(
    cfg: &ExperimentConfig,
    res: &PrefillResult,
    q: &DenseMatrix,
    k: &DenseMatrix,
) -> Result<()> {
    let n = q.rows();
    let d = q.cols();
    let exact = scaled_scores(q, k)?;
    let key_deltas = cfg.strategy == ConstructionStrategy::TopDownKey;
    let bound = if key_deltas {
        Bound::new(cfg.theta, d, n, max_abs(k))
    } else {
        Bound::new(cfg.theta, d, n, max_abs(q))
    };
    for i in 0..n {
        for j in 0..n {
            let got = res.scores.scores.get(i, j);
            let want = exact.get(i, j);
            match res.scores.flag(i, j) {
                Exactness::Masked => {
                    invariant(j > i, || format!("unmasked entry ({i},{j}) flagged masked"))?
                }
                Exactness::Full => invariant(got.to_bits() == want.to_bits(), || {
                    format!("full entry ({i},{j}) = {got} differs from oracle {want}")
                })?,
                Exactness::Approximate => {
                    let l1 = if key_deltas {
                        l1(q.row(i))
                    } else {
                        l1(k.row(j))
                    };
                    let e = dot64(q.row(i), k.row(j)) * bound.scale as f64;
                    invariant(bound.holds(got, e, l1), || {
                        format!("approximate entry ({i},{j}) = {got} exceeds the bound around {e}")
                    })?
                }
            }
        }
        if key_deltas {
            let (got, want) = (res.scores.scores.get(i, 0), exact.get(i, 0));
            invariant(got.to_bits() == want.to_bits(), || {
                format!("score column 0 row {i} = {got} differs from oracle {want}")
            })?;
        }
    }
    let r = &res.report;
    invariant(
        r.s_c == computational_sparsity(r.s_m, r.window, r.n),
        || {
            format!(
                "s_c {} does not follow from s_m {} and window {}",
                r.s_c, r.s_m, r.window
            )
        },
    )?;
    let dense = if res.report.window == 0 {
        n * n * d
    } else {
        n * (n + 1) / 2 * d
    };
    invariant(r.mac_used + r.mac_skipped == dense as u64, || {
        format!(
            "prefill MACs {} + {} != dense-equivalent {dense}",
            r.mac_used, r.mac_skipped
        )
    })?;
    if let Some(cache) = &res.cache {
        cache.validate()?;
    }
    Ok(())
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn prefill(
    cfg: &ExperimentConfig,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<PrefillResult> {
    let hybrid = cfg.hybrid();
    Ok(match cfg.strategy {
        ConstructionStrategy::TopDownKey => prefill_attention(q, k, v, &hybrid)?,
        _ => prefill_attention_ablation(q, k, v, &hybrid)?,
    })
}

/// Runs one head: prefill on the first `n` rows, then (end-to-end) one
/// decode step per remaining row with the oracle evaluated in lockstep.
pub fn run_head(cfg: &ExperimentConfig, t: &HeadTensors) -> Result<HeadRun> {
    let n = cfg.n;
    let d = cfg.d_head;
    let (q, k, v) = (
        leading_rows(&t.q, n),
        leading_rows(&t.k, n),
        leading_rows(&t.v, n),
    );
    let res = prefill(cfg, &q, &k, &v)?;
    check_prefill(cfg, &res, &q, &k)?;
    let prefill_report = evaluate_prefill(&res, &q, &k, &v)?;

    let mut outputs = res.output.data().to_vec();
    let mut cache = res.cache;
    let mut decode = None;
    if cfg.scenario == Scenario::EndToEnd {
        let c = cache.as_mut().ok_or_else(|| {
            HarnessError::Config("end-to-end runs need the key-delta cache".into())
        })?;
        let report = run_decode(cfg, t, c, &mut outputs)?;
        decode = Some(report);
    }
    let rows = outputs.len() / d;
    Ok(HeadRun {
        prefill: prefill_report,
        decode,
        outputs: DenseMatrix::new(rows, d, outputs)?,
        scores: res.scores,
        cache,
    })
}

fn run_decode(
    cfg: &ExperimentConfig,
    t: &HeadTensors,
    cache: &mut DeltaKVCache,
    outputs: &mut Vec<f32>,
) -> Result<AttentionReport> {
    let d = cfg.d_head;
    let hybrid = cfg.hybrid();
    let scale = score_scale(d);
    let total = cfg.total_rows();
    let bound = Bound::new(cfg.theta, d, total, max_abs(&t.k));
    let mut macs = MacBreakdown::default();
    let mut stats = ErrorStats::default();
    let mut out_err = 0.0f64;
    for step in cfg.n..total {
        let q_new = t.q.row(step);
        let out = decode_step(q_new, t.k.row(step), t.v.row(step), cache, &hybrid)?;
        let exact: Vec<f32> = (0..=step).map(|p| dot(q_new, t.k.row(p)) * scale).collect();
        let l1q = l1(q_new);
        for (p, (&got, &want)) in out.scores.iter().zip(&exact).enumerate() {
            if p >= out.exact_from {
                invariant(got.to_bits() == want.to_bits(), || {
                    format!("decode step {step}: exact position {p} = {got}, oracle {want}")
                })?;
            } else {
                let e = dot64(q_new, t.k.row(p)) * scale as f64;
                invariant(bound.holds(got, e, l1q), || {
                    format!("decode step {step}: position {p} = {got} exceeds the bound around {e}")
                })?;
            }
        }
        let step_macs = out.macs.used() + out.macs.skipped();
        invariant(step_macs == ((step + 1) * d) as u64, || {
            format!(
                "decode step {step}: {step_macs} MACs for {} positions",
                step + 1
            )
        })?;
        stats.merge(&compare_rows(&out.scores, &exact)?);
        let oracle = dense_attention(
            &DenseMatrix::new(1, d, q_new.to_vec())?,
            &leading_rows(&t.k, step + 1),
            &leading_rows(&t.v, step + 1),
            false,
        )?;
        for (a, b) in out.output.iter().zip(oracle.row(0)) {
            out_err = out_err.max((a - b).abs() as f64);
        }
        macs.merge(out.macs);
        outputs.extend_from_slice(&out.output);
    }
    cache.validate()?;
    let mut report = AttentionReport::new(
        Stage::Decode,
        total,
        cfg.w_d,
        cache.delta_nnz(),
        ((total - 1) * d) as u64,
        d as u64,
        macs,
    );
    report.record_scores(&stats);
    report.record_output_error(out_err);
    Ok(report)
}

/// Runs all heads in parallel and merges their reports.
pub fn run_experiment(cfg: &ExperimentConfig, tensors: &[HeadTensors]) -> Result<Experiment> {
    cfg.validate()?;
    if tensors.len() != cfg.heads {
        return Err(HarnessError::Config(format!(
            "{} head tensors for {} heads",
            tensors.len(),
            cfg.heads
        )));
    }
    let heads: Vec<HeadRun> = tensors
        .par_iter()
        .map(|t| run_head(cfg, t))
        .collect::<Result<_>>()?;
    let prefill = merge_reports(&heads.iter().map(|h| h.prefill.clone()).collect::<Vec<_>>())?;
    let decode = match cfg.scenario {
        Scenario::EndToEnd => Some(merge_reports(
            &heads
                .iter()
                .filter_map(|h| h.decode.clone())
                .collect::<Vec<_>>(),
        )?),
        Scenario::PrefillOnly => None,
    };
    Ok(Experiment {
        config: cfg.clone(),
        prefill,
        decode,
        heads,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub rng: &'static str,
    pub basis: &'static str,
    pub accuracy_proxy: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
}

impl Metadata {
    pub fn new(timestamp_unix: Option<u64>) -> Self {
        Self {
            tool: "delta-attn",
            version: env!("CARGO_PKG_VERSION"),
            rng: "ChaCha20 (rand_chacha), seed_from_u64(seed), stream 3*head + {0: q, 1: k, 2: v}",
            basis: "first key stored densely; deltas start at position 1; s_m excludes the basis, s_m_with_basis includes it",
            accuracy_proxy: "task accuracy needs model weights; reports carry score and output error against dense attention instead",
            timestamp_unix,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadSummary<'a> {
    pub head: usize,
    pub prefill: &'a AttentionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode: Option<&'a AttentionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_memory: Option<CacheMemory>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport<'a> {
    pub metadata: Metadata,
    pub config: &'a ExperimentConfig,
    pub prefill: &'a AttentionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode: Option<&'a AttentionReport>,
    pub per_head: Vec<HeadSummary<'a>>,
}

impl Experiment {
    pub fn report(&self, timestamp_unix: Option<u64>) -> RunReport<'_> {
        RunReport {
            metadata: Metadata::new(timestamp_unix),
            config: &self.config,
            prefill: &self.prefill,
            decode: self.decode.as_ref(),
            per_head: self
                .heads
                .iter()
                .enumerate()
                .map(|(head, h)| HeadSummary {
                    head,
                    prefill: &h.prefill,
                    decode: h.decode.as_ref(),
                    cache_memory: h.cache.as_ref().map(DeltaKVCache::memory_report),
                })
                .collect(),
        }
    }

    pub fn report_json(&self, timestamp_unix: Option<u64>) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.report(timestamp_unix)).map_err(|e| {
            HarnessError::Encode {
                what: "report",
                detail: e.to_string(),
            }
        })?;
        s.push('\n');
        Ok(s)
    }

    /// `[heads, rows, d_head]` attention outputs.
    pub fn outputs(&self) -> Result<Tensor> {
        Tensor::stack(
            &self
                .heads
                .iter()
                .map(|h| h.outputs.clone())
                .collect::<Vec<_>>(),
        )
    }

    /// Report a sweep row is built from: decode for end-to-end runs.
    pub fn headline(&self) -> &AttentionReport {
        self.decode.as_ref().unwrap_or(&self.prefill)
    }
}
