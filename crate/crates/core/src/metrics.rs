//! Sparsity, MAC and approximation-error accounting.
//!
//! Task-level accuracy needs real model weights, so reports carry score
//! error (pre-softmax, after scaling) and attention-output error against the
//! dense oracle instead.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::delta::sparsity_from_counts;
use crate::delta_matmul::{Exactness, MacCounter, ScoreMatrix};
use crate::error::{Error, Result};
use crate::hybrid::{computational_sparsity, PrefillResult};
use crate::tensor::{dense_attention, scaled_scores, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prefill,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        })
    }
}

/// MACs spent on exactly computed entries (full-window dot products and
/// basis starts of the recursion) versus the delta columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub exact: MacCounter,
    pub delta: MacCounter,
}

impl MacBreakdown {
    pub fn merge(&mut self, other: MacBreakdown) {
        self.exact.merge(other.exact);
        self.delta.merge(other.delta);
    }

    pub fn used(&self) -> u64 {
        self.exact.mac + self.delta.mac
    }

    pub fn skipped(&self) -> u64 {
        self.exact.skipped + self.delta.skipped
    }
}

/// Running error sums; kept raw so statistics merge exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: u64,
    pub max_abs: f64,
    pub sum_abs: f64,
    pub sum_sq_err: f64,
    pub sum_sq_ref: f64,
}

impl ErrorStats {
    pub fn push(&mut self, approx: f32, exact: f32) {
        let e = (approx as f64 - exact as f64).abs();
        self.count += 1;
        self.max_abs = self.max_abs.max(e);
        self.sum_abs += e;
        self.sum_sq_err += e * e;
        self.sum_sq_ref += exact as f64 * exact as f64;
    }

    pub fn merge(&mut self, other: &ErrorStats) {
        self.count += other.count;
        self.max_abs = self.max_abs.max(other.max_abs);
        self.sum_abs += other.sum_abs;
        self.sum_sq_err += other.sum_sq_err;
        self.sum_sq_ref += other.sum_sq_ref;
    }

    pub fn mean_abs(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_abs / self.count as f64
        }
    }

    /// `‖approx − exact‖_F / ‖exact‖_F`; falls back to the absolute norm
    /// when the reference is identically zero.
    pub fn frobenius_rel(&self) -> f64 {
        let err = self.sum_sq_err.sqrt();
        if self.sum_sq_ref > 0.0 {
            err / self.sum_sq_ref.sqrt()
        } else {
            err
        }
    }
}

/// Entrywise comparison over the unmasked entries of `approx`.
pub fn compare_to_oracle(approx: &ScoreMatrix, exact: &DenseMatrix) -> Result<ErrorStats> {
    if approx.rows() != exact.rows() || approx.cols() != exact.cols() {
        return Err(Error::shape(
            "compare_to_oracle",
            format!(
                "{}x{} vs {}x{}",
                approx.rows(),
                approx.cols(),
                exact.rows(),
                exact.cols()
            ),
        ));
    }
    let mut stats = ErrorStats::default();
    for ((&a, &e), &flag) in approx
        .scores
        .data()
        .iter()
        .zip(exact.data())
        .zip(&approx.exactness)
    {
        if flag != Exactness::Masked {
            stats.push(a, e);
        }
    }
    Ok(stats)
}

/// Comparison of two equally long score vectors (decode rows).
pub fn compare_rows(approx: &[f32], exact: &[f32]) -> Result<ErrorStats> {
    if approx.len() != exact.len() {
        return Err(Error::shape(
            "compare_rows",
            format!("{} vs {} entries", approx.len(), exact.len()),
        ));
    }
    let mut stats = ErrorStats::default();
    for (&a, &e) in approx.iter().zip(exact) {
        stats.push(a, e);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub stage: Stage,
    pub heads: u32,
    pub n: usize,
    /// Full-attention window; 0 when no window was applied.
    pub window: usize,
    /// Delta-matrix sparsity, basis excluded.
    pub s_m: f32,
    /// Delta-matrix sparsity with the dense basis counted as nonzeros.
    pub s_m_with_basis: f32,
    pub s_c: f32,
    /// Set when there were no delta columns and `s_m` fell back to 1.
    pub s_m_defaulted: bool,
    pub window_exceeds_n: bool,
    pub delta_nnz: u64,
    pub delta_elements: u64,
    pub basis_elements: u64,
    pub mac_used: u64,
    pub mac_skipped: u64,
    pub mac_delta_used: u64,
    pub mac_delta_skipped: u64,
    pub err_max_abs: f64,
    pub err_mean_abs: f64,
    pub err_frobenius_rel: f64,
    pub output_err_max: f64,
    pub err_count: u64,
    pub err_abs_sum: f64,
    pub err_sq_sum: f64,
    pub ref_sq_sum: f64,
}

impl AttentionReport {
    /// Sparsity and MAC part of a single-head report; error fields start at 0.
    pub fn new(
        stage: Stage,
        n: usize,
        window: usize,
        delta_nnz: u64,
        delta_elements: u64,
        basis_elements: u64,
        macs: MacBreakdown,
    ) -> Self {
        let mut r = Self {
            stage,
            heads: 1,
            n,
            window,
            s_m: 0.0,
            s_m_with_basis: 0.0,
            s_c: 0.0,
            s_m_defaulted: false,
            window_exceeds_n: false,
            delta_nnz,
            delta_elements,
            basis_elements,
            mac_used: macs.used(),
            mac_skipped: macs.skipped(),
            mac_delta_used: macs.delta.mac,
            mac_delta_skipped: macs.delta.skipped,
            err_max_abs: 0.0,
            err_mean_abs: 0.0,
            err_frobenius_rel: 0.0,
            output_err_max: 0.0,
            err_count: 0,
            err_abs_sum: 0.0,
            err_sq_sum: 0.0,
            ref_sq_sum: 0.0,
        };
        r.refresh_sparsity();
        r
    }

    fn refresh_sparsity(&mut self) {
        self.s_m = sparsity_from_counts(self.delta_nnz, self.delta_elements);
        self.s_m_with_basis = sparsity_from_counts(
            self.delta_nnz + self.basis_elements,
            self.delta_elements + self.basis_elements,
        );
        self.s_m_defaulted = self.delta_elements == 0;
        self.window_exceeds_n = self.window > self.n;
        self.s_c = computational_sparsity(self.s_m, self.window, self.n);
    }

    pub fn score_errors(&self) -> ErrorStats {
        ErrorStats {
            count: self.err_count,
            max_abs: self.err_max_abs,
            sum_abs: self.err_abs_sum,
            sum_sq_err: self.err_sq_sum,
            sum_sq_ref: self.ref_sq_sum,
        }
    }

    /// Folds score-error statistics into the report.
    pub fn record_scores(&mut self, stats: &ErrorStats) {
        let mut all = self.score_errors();
        all.merge(stats);
        self.err_count = all.count;
        self.err_max_abs = all.max_abs;
        self.err_abs_sum = all.sum_abs;
        self.err_sq_sum = all.sum_sq_err;
        self.ref_sq_sum = all.sum_sq_ref;
        self.err_mean_abs = all.mean_abs();
        self.err_frobenius_rel = all.frobenius_rel();
    }

    pub fn record_output_error(&mut self, max_abs: f64) {
        self.output_err_max = self.output_err_max.max(max_abs);
    }

    pub fn macs(&self) -> MacBreakdown {
        MacBreakdown {
            exact: MacCounter {
                mac: self.mac_used - self.mac_delta_used,
                skipped: self.mac_skipped - self.mac_delta_skipped,
            },
            delta: MacCounter {
                mac: self.mac_delta_used,
                skipped: self.mac_delta_skipped,
            },
        }
    }
}

/// Combines per-head reports of the same stage, length and window.
pub fn merge_reports(reports: &[AttentionReport]) -> Result<AttentionReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to merge".into()))?;
    let mut out = first.clone();
    for r in &reports[1..] {
        if r.stage != out.stage {
            return Err(Error::Config(format!(
                "cannot merge {} and {} reports",
                out.stage, r.stage
            )));
        }
        if r.n != out.n || r.window != out.window {
            return Err(Error::Config(format!(
                "cannot merge reports with (n, window) = ({}, {}) and ({}, {})",
                out.n, out.window, r.n, r.window
            )));
        }
        out.heads += r.heads;
        out.delta_nnz += r.delta_nnz;
        out.delta_elements += r.delta_elements;
        out.basis_elements += r.basis_elements;
        out.mac_used += r.mac_used;
        out.mac_skipped += r.mac_skipped;
        out.mac_delta_used += r.mac_delta_used;
        out.mac_delta_skipped += r.mac_delta_skipped;
        out.record_scores(&r.score_errors());
        out.record_output_error(r.output_err_max);
    }
    out.refresh_sparsity();
    Ok(out)
}

/// Fills the error fields of a prefill report by running the dense oracle
/// on the same tensors.
pub fn evaluate_prefill(
    result: &PrefillResult,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<AttentionReport> {
    let exact_scores = scaled_scores(q, k)?;
    let oracle = dense_attention(q, k, v, true)?;
    let mut report = result.report.clone();
    report.record_scores(&compare_to_oracle(&result.scores, &exact_scores)?);
    report.record_output_error(result.output.max_abs_diff(&oracle)? as f64);
    Ok(report)
}
