//! Thresholded delta encoding of a vector sequence.
//!
//! A sequence `a(0), a(1), …` is stored as a dense basis `a(0)` plus one
//! sparse column per later step. Each element keeps a held reference value;
//! an element fires only when it moved strictly more than `theta` away from
//! that reference, and the reference then advances by the recorded delta.
//! The reference is therefore always `basis + Σ deltas`, which is exactly
//! what [`reconstruct`] and the score recursion see.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Running reference vector and the number of vectors consumed after the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaState {
    reference: Vec<f32>,
    step: usize,
}

impl DeltaState {
    pub fn reference(&self) -> &[f32] {
        &self.reference
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn d_head(&self) -> usize {
        self.reference.len()
    }

    /// Rebuilds a state from stored parts (used by cache deserialization).
    pub fn from_parts(reference: Vec<f32>, step: usize) -> Self {
        Self { reference, step }
    }

    /// In-place form of [`delta_encode_step`].
    pub fn advance(&mut self, x: &[f32], theta: f32) -> Result<SparseDeltaColumn> {
        check_theta(theta)?;
        if x.len() != self.reference.len() {
            return Err(Error::shape(
                "delta_encode_step",
                format!(
                    "input has {} elements, reference has {}",
                    x.len(),
                    self.reference.len()
                ),
            ));
        }
        let mut entries = Vec::new();
        for (i, (&xi, r)) in x.iter().zip(self.reference.iter_mut()).enumerate() {
            let delta = xi - *r;
            if delta.abs() > theta {
                entries.push((i as u32, delta));
                *r += delta;
            }
        }
        self.step += 1;
        Ok(SparseDeltaColumn {
            index: self.step,
            entries,
        })
    }
}

pub fn init_state(basis: &[f32]) -> DeltaState {
    DeltaState {
        reference: basis.to_vec(),
        step: 0,
    }
}

/// One thresholded delta vector in compressed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDeltaColumn {
    /// Encoding step this column was produced at (1-based).
    pub index: usize,
    /// `(element, delta)` pairs; elements strictly ascending, deltas nonzero.
    pub entries: Vec<(u32, f32)>,
}

impl SparseDeltaColumn {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Checks the column's structural invariants against `d_head`.
    pub fn validate(&self, d_head: usize) -> Result<()> {
        let mut prev: Option<u32> = None;
        for &(i, v) in &self.entries {
            if (i as usize) >= d_head {
                return Err(Error::Bounds {
                    index: i as usize,
                    len: d_head,
                });
            }
            if prev.is_some_and(|p| p >= i) {
                return Err(Error::State(format!(
                    "column {}: element indices not strictly ascending",
                    self.index
                )));
            }
            if v == 0.0 || !v.is_finite() {
                return Err(Error::State(format!(
                    "column {}: stored delta {v} at element {i}",
                    self.index
                )));
            }
            prev = Some(i);
        }
        Ok(())
    }

    /// Adds the column into a dense reference vector.
    pub fn apply(&self, reference: &mut [f32]) {
        for &(i, v) in &self.entries {
            reference[i as usize] += v;
        }
    }
}

fn check_theta(theta: f32) -> Result<()> {
    if !theta.is_finite() || theta < 0.0 {
        return Err(Error::Config(format!(
            "threshold must be finite and >= 0, got {theta}"
        )));
    }
    Ok(())
}

/// Encodes `x` against `state`, returning the sparse delta and the advanced state.
pub fn delta_encode_step(
    x: &[f32],
    state: &DeltaState,
    theta: f32,
) -> Result<(SparseDeltaColumn, DeltaState)> {
    let mut next = state.clone();
    let column = next.advance(x, theta)?;
    Ok((column, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    TopDown,
    BottomUp,
}

/// Which operand carries the deltas and which end of it is the basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstructionStrategy {
    /// Deltas over query rows, basis = first query. Ablation only.
    TopDownQuery,
    /// Deltas over query rows, basis = last query. Ablation only.
    BottomUpQuery,
    /// Deltas over key rows, basis = first key. Used for prefill and decode.
    #[default]
    TopDownKey,
}

impl ConstructionStrategy {
    pub const ALL: [ConstructionStrategy; 3] = [
        ConstructionStrategy::TopDownQuery,
        ConstructionStrategy::BottomUpQuery,
        ConstructionStrategy::TopDownKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstructionStrategy::TopDownQuery => "top-down-query",
            ConstructionStrategy::BottomUpQuery => "bottom-up-query",
            ConstructionStrategy::TopDownKey => "top-down-key",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            ConstructionStrategy::BottomUpQuery => Direction::BottomUp,
            _ => Direction::TopDown,
        }
    }
}

impl fmt::Display for ConstructionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConstructionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// A sequence as basis plus sparse delta columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEncoding {
    pub(crate) basis: Vec<f32>,
    pub(crate) columns: Vec<SparseDeltaColumn>,
    pub(crate) terminal_state: DeltaState,
    pub(crate) theta: f32,
    pub(crate) direction: Direction,
}

impl DeltaEncoding {
    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    /// Delta columns in encoding order (step 1 first).
    pub fn columns(&self) -> &[SparseDeltaColumn] {
        &self.columns
    }

    pub fn terminal_state(&self) -> &DeltaState {
        &self.terminal_state
    }

    pub fn theta(&self) -> f32 {
        self.theta
    }

    pub fn d_head(&self) -> usize {
        self.basis.len()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Number of encoded positions (basis included).
    pub fn len(&self) -> usize {
        self.columns.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sequence row encoded at `step`.
    pub fn position(&self, step: usize) -> usize {
        match self.direction {
            Direction::TopDown => step,
            Direction::BottomUp => self.len() - 1 - step,
        }
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(SparseDeltaColumn::nnz).sum()
    }

    /// Element count of the delta columns, basis excluded: `(n-1)·d_head`.
    pub fn delta_elements(&self) -> usize {
        self.columns.len() * self.d_head()
    }
}

/// Encodes every row of `seq`, starting from the first row (top-down) or
/// the last row (bottom-up).
pub fn build_delta_encoding(
    seq: &DenseMatrix,
    theta: f32,
    direction: Direction,
) -> Result<DeltaEncoding> {
    check_theta(theta)?;
    let n = seq.rows();
    if n == 0 {
        return Err(Error::shape("build_delta_encoding", "empty sequence"));
    }
    let order: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::TopDown => Box::new(0..n),
        Direction::BottomUp => Box::new((0..n).rev()),
    };
    let mut order = order.map(|r| seq.row(r));
    let basis = order.next().expect("n >= 1").to_vec();
    let mut state = init_state(&basis);
    let mut columns = Vec::with_capacity(n - 1);
    for row in order {
        columns.push(state.advance(row, theta)?);
    }
    Ok(DeltaEncoding {
        basis,
        columns,
        terminal_state: state,
        theta,
        direction,
    })
}

/// Prefix-sum inverse: row `p` is the reference vector held at that position.
pub fn reconstruct(enc: &DeltaEncoding) -> DenseMatrix {
    let n = enc.len();
    let d = enc.d_head();
    let mut out = DenseMatrix::zeros(n, d);
    let mut reference = enc.basis.clone();
    out.row_mut(enc.position(0)).copy_from_slice(&reference);
    for (s, col) in enc.columns.iter().enumerate() {
        col.apply(&mut reference);
        out.row_mut(enc.position(s + 1)).copy_from_slice(&reference);
    }
    out
}

/// Zero fraction of the delta matrix with the dense basis excluded.
///
/// A single-position encoding has no delta columns and reports `1.0`.
pub fn element_sparsity(enc: &DeltaEncoding) -> f32 {
    sparsity_from_counts(enc.nnz() as u64, enc.delta_elements() as u64)
}

/// Zero fraction with the basis counted as `d_head` nonzeros.
pub fn element_sparsity_with_basis(enc: &DeltaEncoding) -> f32 {
    let d = enc.d_head() as u64;
    sparsity_from_counts(enc.nnz() as u64 + d, enc.delta_elements() as u64 + d)
}

pub(crate) fn sparsity_from_counts(nnz: u64, elements: u64) -> f32 {
    if elements == 0 {
        return 1.0;
    }
    (1.0 - nnz as f64 / elements as f64) as f32
}
