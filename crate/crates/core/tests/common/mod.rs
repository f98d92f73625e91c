//! Test-only reference implementations, independent of the crate's kernels.
#![allow(dead_code, clippy::needless_range_loop)]

use delta_attn::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f32>>();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// `k_0 ~ N(0, 1)`, `k_t = k_{t-1} + N(0, sigma²)` per element.
pub fn random_walk(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f32) -> DenseMatrix {
    let mut data = Vec::with_capacity(rows * cols);
    for t in 0..rows {
        for c in 0..cols {
            let z: f32 = StandardNormal.sample(rng);
            let v = if t == 0 {
                z
            } else {
                data[(t - 1) * cols + c] + sigma * z
            };
            data.push(v);
        }
    }
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn to_f64(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Triple loop in f64.
pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; cols]; a.len()];
    for i in 0..a.len() {
        for j in 0..cols {
            let mut acc = 0.0;
            for p in 0..inner {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose64(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn softmax64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Scaled scores `q·kᵀ/sqrt(d)` in f64.
pub fn scores64(q: &DenseMatrix, k: &DenseMatrix) -> Vec<Vec<f64>> {
    let s = naive_matmul(&to_f64(q), &transpose64(&to_f64(k)));
    let scale = 1.0 / (q.cols() as f64).sqrt();
    s.into_iter()
        .map(|r| r.into_iter().map(|v| v * scale).collect())
        .collect()
}

/// Attention in f64; causal restricts row `i` to keys `0..=i`.
pub fn attention64(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    causal: bool,
) -> Vec<Vec<f64>> {
    let s = scores64(q, k);
    let vv = to_f64(v);
    s.iter()
        .enumerate()
        .map(|(i, row)| {
            let active = if causal { i + 1 } else { row.len() };
            let p = softmax64(&row[..active]);
            (0..v.cols())
                .map(|c| (0..active).map(|j| p[j] * vv[j][c]).sum())
                .collect()
        })
        .collect()
}

pub fn max_abs_diff64(a: &DenseMatrix, b: &[Vec<f64>]) -> f64 {
    a.iter_rows()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p as f64 - q).abs()))
        .fold(0.0, f64::max)
}

/// Element-by-element hold/fire simulation; returns the fire count of
/// every step after the first and the held reference trajectory.
pub fn simulate_hold_rule(seq: &DenseMatrix, theta: f32) -> (Vec<usize>, Vec<Vec<f32>>) {
    let d = seq.cols();
    let mut fires = Vec::new();
    let mut traj = vec![seq.row(0).to_vec()];
    let mut held: Vec<f32> = seq.row(0).to_vec();
    for t in 1..seq.rows() {
        let mut count = 0;
        for i in 0..d {
            let x = seq.get(t, i);
            let diff = x - held[i];
            if diff.abs() > theta {
                held[i] += diff;
                count += 1;
            }
        }
        fires.push(count);
        traj.push(held.clone());
    }
    (fires, traj)
}

pub fn l1(v: &[f32]) -> f32 {
    v.iter().map(|x| x.abs()).sum()
}
