//! Parameter sweeps over `theta × gamma × w_d`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::run_experiment;
use crate::synth::HeadTensors;

/// Column order of sweep CSVs.
pub const HEADER: &str = "theta,gamma,w_d,stage,n,window,s_m,s_c,s_m_with_basis,err_max_abs,err_mean_abs,err_frobenius_rel,output_err_max,mac_used,mac_skipped";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f32,
    pub gamma: f64,
    pub w_d: usize,
    pub stage: String,
    pub n: usize,
    pub window: usize,
    pub s_m: f32,
    pub s_c: f32,
    pub s_m_with_basis: f32,
    pub err_max_abs: f64,
    pub err_mean_abs: f64,
    pub err_frobenius_rel: f64,
    pub output_err_max: f64,
    pub mac_used: u64,
    pub mac_skipped: u64,
}

/// One row per combination, `theta` outermost and `w_d` innermost. The
/// tensors do not depend on the swept parameters and are shared. End-to-end
/// rows describe the decode stage.
pub fn sweep(
    template: &ExperimentConfig,
    tensors: &[HeadTensors],
    thetas: &[f32],
    gammas: &[f64],
    w_ds: &[usize],
) -> Result<Vec<SweepRow>> {
    if thetas.is_empty() || gammas.is_empty() || w_ds.is_empty() {
        return Err(HarnessError::Config("sweep lists must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(thetas.len() * gammas.len() * w_ds.len());
    for &theta in thetas {
        for &gamma in gammas {
            for &w_d in w_ds {
                let cfg = ExperimentConfig {
                    theta,
                    gamma,
                    w_d,
                    ..template.clone()
                };
                let exp = run_experiment(&cfg, tensors)?;
                let r = exp.headline();
                rows.push(SweepRow {
                    theta,
                    gamma,
                    w_d,
                    stage: r.stage.to_string(),
                    n: r.n,
                    window: r.window,
                    s_m: r.s_m,
                    s_c: r.s_c,
                    s_m_with_basis: r.s_m_with_basis,
                    err_max_abs: r.err_max_abs,
                    err_mean_abs: r.err_mean_abs,
                    err_frobenius_rel: r.err_frobenius_rel,
                    output_err_max: r.output_err_max,
                    mac_used: r.mac_used,
                    mac_skipped: r.mac_skipped,
                });
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
    let enc = |e: csv::Error| HarnessError::Encode {
        what: "sweep csv",
        detail: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(HEADER.split(',')).map_err(enc)?;
    for r in rows {
        w.serialize(r).map_err(enc)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Encode {
        what: "sweep csv",
        detail: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != HEADER {
        return Err(HarnessError::Config("unexpected sweep header".into()));
    }
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::Config(format!("sweep row: {e}")))
}

pub fn write_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows)?).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_synthetic;
    use delta_attn::computational_sparsity;

    #[test]
    fn shape_and_recomputation() {
        let cfg = ExperimentConfig {
            n: 32,
            d_head: 8,
            heads: 1,
            ..Default::default()
        };
        let t = gen_synthetic(&cfg).unwrap();
        let rows = sweep(&cfg, &t, &[0.05, 0.1, 0.2], &[0.1, 0.25], &[4]).unwrap();
        assert_eq!(rows.len(), 6);
        let text = to_csv(&rows).unwrap();
        assert_eq!(text.lines().next(), Some(HEADER));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
        for r in &back {
            assert_eq!(r.s_c, computational_sparsity(r.s_m, r.window, r.n));
        }
    }

    #[test]
    fn single_combination_matches_run() {
        let cfg = ExperimentConfig {
            n: 20,
            d_head: 4,
            heads: 2,
            ..Default::default()
        };
        let t = gen_synthetic(&cfg).unwrap();
        let row = &sweep(&cfg, &t, &[cfg.theta], &[cfg.gamma], &[cfg.w_d]).unwrap()[0];
        let run = run_experiment(&cfg, &t).unwrap();
        assert_eq!(row.s_m, run.prefill.s_m);
        assert_eq!(row.err_max_abs, run.prefill.err_max_abs);
        assert_eq!(row.mac_used, run.prefill.mac_used);
    }

    #[test]
    fn empty_list_is_config_error() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(
            sweep(&cfg, &[], &[], &[0.1], &[4]),
            Err(HarnessError::Config(_))
        ));
    }
}
