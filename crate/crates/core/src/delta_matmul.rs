//! Regular-delta score computation.
//!
//! With keys encoded as a basis plus sparse delta columns, the score of a
//! query against position `t` is built recursively: position 0 is a dense
//! dot product with the basis, and every later position adds the query's
//! dot product with that step's delta, touching only the stored nonzeros.

use serde::{Deserialize, Serialize};

use crate::delta::{DeltaEncoding, SparseDeltaColumn};
use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

/// How a score entry was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exactness {
    Masked,
    Approximate,
    Full,
}

impl Exactness {
    /// Heatmap code: 0 = masked, 1 = approximate, 2 = full.
    pub fn code(self) -> u8 {
        match self {
            Exactness::Masked => 0,
            Exactness::Approximate => 1,
            Exactness::Full => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Exactness::Masked),
            1 => Some(Exactness::Approximate),
            2 => Some(Exactness::Full),
            _ => None,
        }
    }
}

/// Scores with a per-entry provenance flag of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: DenseMatrix,
    pub exactness: Vec<Exactness>,
}

impl ScoreMatrix {
    pub fn new(scores: DenseMatrix, exactness: Vec<Exactness>) -> Result<Self> {
        if exactness.len() != scores.rows() * scores.cols() {
            return Err(Error::shape(
                "ScoreMatrix::new",
                format!(
                    "{} flags for {}x{} scores",
                    exactness.len(),
                    scores.rows(),
                    scores.cols()
                ),
            ));
        }
        Ok(Self { scores, exactness })
    }

    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    pub fn flag(&self, i: usize, j: usize) -> Exactness {
        self.exactness[i * self.cols() + j]
    }

    pub fn count(&self, kind: Exactness) -> usize {
        self.exactness.iter().filter(|&&e| e == kind).count()
    }
}

/// Multiply-accumulate tally. `mac + skipped` is the dense-equivalent work
/// of whatever region the counter covered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    pub mac: u64,
    pub skipped: u64,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.mac + self.skipped
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total() as f64
        }
    }

    pub fn merge(&mut self, other: MacCounter) {
        self.mac += other.mac;
        self.skipped += other.skipped;
    }
}

#[inline]
pub(crate) fn sparse_dot(q: &[f32], column: &SparseDeltaColumn) -> f32 {
    column
        .entries
        .iter()
        .fold(0.0f32, |acc, &(i, v)| acc + q[i as usize] * v)
}

/// Scores of one query against steps `0..=upto` of a basis + delta stream.
/// Shared by the batch kernel, [`delta_score_single_query`] and the cache.
pub(crate) fn score_recursion(
    q: &[f32],
    basis: &[f32],
    columns: &[SparseDeltaColumn],
    upto: usize,
    counter: &mut MacCounter,
) -> Vec<f32> {
    let d = basis.len() as u64;
    let mut out = Vec::with_capacity(upto + 1);
    let mut running = dot(q, basis);
    counter.mac += d;
    out.push(running);
    for col in &columns[..upto] {
        running += sparse_dot(q, col);
        let nnz = col.nnz() as u64;
        counter.mac += nnz;
        counter.skipped += d - nnz;
        out.push(running);
    }
    out
}

/// Full `n_query × n_positions` score rectangle from an encoding.
///
/// Columns are laid out by sequence position, so a bottom-up encoding still
/// yields scores in original order. The basis position is flagged
/// [`Exactness::Full`], every other entry [`Exactness::Approximate`].
/// The counter sees `n_query · d_head` MACs for the basis and
/// `n_query · nnz` per delta column.
pub fn delta_score_columns(
    q: &DenseMatrix,
    enc: &DeltaEncoding,
    counter: &mut MacCounter,
) -> Result<ScoreMatrix> {
    if q.cols() != enc.d_head() {
        return Err(Error::shape(
            "delta_score_columns",
            format!(
                "q has {} columns, encoding d_head {}",
                q.cols(),
                enc.d_head()
            ),
        ));
    }
    let n = enc.len();
    let positions: Vec<usize> = (0..n).map(|s| enc.position(s)).collect();
    let mut scores = DenseMatrix::zeros(q.rows(), n);
    for i in 0..q.rows() {
        let row = score_recursion(q.row(i), enc.basis(), enc.columns(), n - 1, counter);
        let dst = scores.row_mut(i);
        for (s, v) in row.into_iter().enumerate() {
            dst[positions[s]] = v;
        }
    }
    let basis_pos = enc.position(0);
    let exactness = (0..q.rows() * n)
        .map(|e| {
            if e % n == basis_pos {
                Exactness::Full
            } else {
                Exactness::Approximate
            }
        })
        .collect();
    ScoreMatrix::new(scores, exactness)
}

/// Scores of a single query against encoding steps `0..=upto`.
pub fn delta_score_single_query(
    q_row: &[f32],
    enc: &DeltaEncoding,
    upto: usize,
    counter: &mut MacCounter,
) -> Result<Vec<f32>> {
    if q_row.len() != enc.d_head() {
        return Err(Error::shape(
            "delta_score_single_query",
            format!(
                "query has {} elements, d_head {}",
                q_row.len(),
                enc.d_head()
            ),
        ));
    }
    if upto >= enc.len() {
        return Err(Error::Bounds {
            index: upto,
            len: enc.len(),
        });
    }
    Ok(score_recursion(
        q_row,
        enc.basis(),
        enc.columns(),
        upto,
        counter,
    ))
}
