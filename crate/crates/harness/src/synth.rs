//! Deterministic synthetic Q/K/V workloads.
//!
//! Each head draws from three ChaCha20 streams (queries, keys, values) of
//! one generator seeded with `seed_from_u64(seed)`; stream ids are
//! `3·head + {0, 1, 2}`. Output depends only on the seed and the shape, not
//! on thread scheduling or platform.

use delta_attn::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::config::{ExperimentConfig, KeyProcess};
use crate::error::{HarnessError, Result};
use crate::tensor_file;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
}

pub const QUERY_STREAM: u64 = 0;
pub const KEY_STREAM: u64 = 1;
pub const VALUE_STREAM: u64 = 2;

pub fn stream(seed: u64, head: usize, which: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(3 * head as u64 + which);
    rng
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("length matches by construction")
}

/// `k_0 ~ N(0, 1)`, then `k_t = k_{t−1} + sigma · N(0, 1)` per element.
pub fn random_walk(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f32) -> DenseMatrix {
    let mut data: Vec<f32> = Vec::with_capacity(rows * cols);
    for t in 0..rows {
        for i in 0..cols {
            let z: f32 = rng.sample(StandardNormal);
            let x = if t == 0 {
                z
            } else {
                data[(t - 1) * cols + i] + sigma * z
            };
            data.push(x);
        }
    }
    DenseMatrix::new(rows, cols, data).expect("length matches by construction")
}

/// Q, K and V for every head, `cfg.total_rows()` rows each.
pub fn gen_synthetic(cfg: &ExperimentConfig) -> Result<Vec<HeadTensors>> {
    let rows = cfg.total_rows();
    let d = cfg.d_head;
    let file_keys = match cfg.key_process {
        KeyProcess::File => Some(load_keys(cfg)?),
        _ => None,
    };
    Ok((0..cfg.heads)
        .map(|h| {
            let q = gaussian(&mut stream(cfg.seed, h, QUERY_STREAM), rows, d);
            let v = gaussian(&mut stream(cfg.seed, h, VALUE_STREAM), rows, d);
            let mut kr = stream(cfg.seed, h, KEY_STREAM);
            let k = match (&file_keys, cfg.key_process) {
                (Some(keys), _) => keys[h].clone(),
                (None, KeyProcess::RandomWalk) => random_walk(&mut kr, rows, d, cfg.sigma),
                (None, _) => gaussian(&mut kr, rows, d),
            };
            HeadTensors { q, k, v }
        })
        .collect())
}

/// Keys from `cfg.key_file`: `[heads, rows, d_head]`, or `[rows, d_head]`
/// for a single head.
fn load_keys(cfg: &ExperimentConfig) -> Result<Vec<DenseMatrix>> {
    let path = cfg
        .key_file
        .as_deref()
        .ok_or_else(|| HarnessError::Config("key_file is not set".into()))?;
    let keys = tensor_file::load(path)?.unstack()?;
    let shape_ok = keys.len() == cfg.heads
        && keys
            .iter()
            .all(|k| k.rows() == cfg.total_rows() && k.cols() == cfg.d_head);
    if !shape_ok {
        let got = keys.first().map_or((0, 0), |k| (k.rows(), k.cols()));
        return Err(HarnessError::Config(format!(
            "{} holds {} heads of {}x{}, config needs {} heads of {}x{}",
            path.display(),
            keys.len(),
            got.0,
            got.1,
            cfg.heads,
            cfg.total_rows(),
            cfg.d_head
        )));
    }
    Ok(keys)
}
