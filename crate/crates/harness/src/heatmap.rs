//! Headerless CSV grids of scores or exactness codes
//! (0 = masked, 1 = approximate, 2 = full).

use std::path::Path;

use delta_attn::{DenseMatrix, Exactness, ScoreMatrix};
use thiserror::Error;

use crate::error::{HarnessError, Result};

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("row {row}, column {col}: invalid cell {cell:?}")]
    Cell {
        row: usize,
        col: usize,
        cell: String,
    },
    #[error("empty grid")]
    Empty,
}

fn write_grid<T: ToString>(rows: usize, cols: usize, cell: impl Fn(usize, usize) -> T) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for i in 0..rows {
        w.write_record((0..cols).map(|j| cell(i, j).to_string()))
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

/// Scores printed with the shortest representation that reads back to the
/// same f32.
pub fn scores_csv(scores: &DenseMatrix) -> String {
    write_grid(scores.rows(), scores.cols(), |i, j| scores.get(i, j))
}

pub fn exactness_csv(map: &ScoreMatrix) -> String {
    write_grid(map.rows(), map.cols(), |i, j| map.flag(i, j).code())
}

fn parse_grid<T>(
    text: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> std::result::Result<(usize, usize, Vec<T>), HeatmapError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut cols = None;
    let mut rows = 0;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let expected = *cols.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(HeatmapError::Ragged {
                row,
                found: rec.len(),
                expected,
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v = parse(cell.trim()).ok_or_else(|| HeatmapError::Cell {
                row,
                col,
                cell: cell.to_string(),
            })?;
            out.push(v);
        }
        rows += 1;
    }
    match cols {
        Some(c) if c > 0 => Ok((rows, c, out)),
        _ => Err(HeatmapError::Empty),
    }
}

pub fn parse_scores_csv(text: &str) -> std::result::Result<DenseMatrix, HeatmapError> {
    let (rows, cols, data) = parse_grid(text, |s| s.parse::<f32>().ok().filter(|v| v.is_finite()))?;
    Ok(DenseMatrix::new(rows, cols, data).expect("grid is rectangular"))
}

/// Reads an exactness grid back as `(rows, cols, flags)`.
pub fn parse_exactness_csv(
    text: &str,
) -> std::result::Result<(usize, usize, Vec<Exactness>), HeatmapError> {
    parse_grid(text, |s| {
        s.parse::<u8>().ok().and_then(Exactness::from_code)
    })
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}
