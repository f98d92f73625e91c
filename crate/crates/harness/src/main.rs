use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use delta_attn::{scaled_scores, DenseMatrix, Exactness, ScoreMatrix};
use delta_attn_harness::error::{HarnessError, Result, EXIT_INVARIANT};
use delta_attn_harness::experiment::run_head;
use delta_attn_harness::{
    cache_file, gen_synthetic, heatmap, run_experiment, selftest, sweep, tensor_file,
};
use delta_attn_harness::{ConfigOverrides, ExperimentConfig};

/// Temporally sparse delta attention: experiments against dense attention.
#[derive(Parser)]
#[command(name = "delta-attn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic q/k/v tensors (`[heads, rows, d_head]` DTNS files).
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment; writes report.json and outputs.dtns.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Record the wall-clock time in the report metadata.
        #[arg(long)]
        timestamp: bool,
        /// Also write the final per-head caches as cache_h<head>.dkvc.
        #[arg(long, alias = "save_cache")]
        save_cache: bool,
    },
    /// Grid over theta x gamma x w_d; writes one CSV row per combination.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f32>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long, alias = "w_ds", value_delimiter = ',')]
        w_ds: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump one head's prefill scores and exactness map as CSV grids.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Dense attention: oracle scores, every unmasked entry full.
        #[arg(long)]
        dense: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn gen(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = cfg.resolve()?;
    let heads = gen_synthetic(&cfg)?;
    create_dir(out)?;
    let q: Vec<DenseMatrix> = heads.iter().map(|h| h.q.clone()).collect();
    let k: Vec<DenseMatrix> = heads.iter().map(|h| h.k.clone()).collect();
    let v: Vec<DenseMatrix> = heads.iter().map(|h| h.v.clone()).collect();
    for (name, mats) in [("q.dtns", q), ("k.dtns", k), ("v.dtns", v)] {
        tensor_file::save(&out.join(name), &tensor_file::Tensor::stack(&mats)?)?;
    }
    println!(
        "wrote {} heads x {} rows x {} to {}",
        cfg.heads,
        cfg.total_rows(),
        cfg.d_head,
        out.display()
    );
    Ok(())
}

fn run(cfg: &ConfigArgs, out: &Path, timestamp: bool, save_cache: bool) -> Result<()> {
    let cfg = cfg.resolve()?;
    let exp = run_experiment(&cfg, &gen_synthetic(&cfg)?)?;
    create_dir(out)?;
    let ts = timestamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    });
    let report_path = out.join("report.json");
    std::fs::write(&report_path, exp.report_json(ts)?)
        .map_err(|e| HarnessError::io(&report_path, e))?;
    tensor_file::save(&out.join("outputs.dtns"), &exp.outputs()?)?;
    if save_cache {
        for (h, run) in exp.heads.iter().enumerate() {
            if let Some(c) = &run.cache {
                cache_file::save(&out.join(format!("cache_h{h}.dkvc")), c)?;
            }
        }
    }
    let r = exp.headline();
    println!(
        "{} n={} window={} s_m={} s_c={} err_max_abs={:.3e} err_frobenius_rel={:.3e}",
        r.stage, r.n, r.window, r.s_m, r.s_c, r.err_max_abs, r.err_frobenius_rel
    );
    Ok(())
}

fn run_sweep(
    cfg: &ConfigArgs,
    thetas: Option<&[f32]>,
    gammas: Option<&[f64]>,
    w_ds: Option<&[usize]>,
    out: &Path,
) -> Result<()> {
    let cfg = cfg.resolve()?;
    let tensors = gen_synthetic(&cfg)?;
    let rows = sweep::sweep(
        &cfg,
        &tensors,
        thetas.unwrap_or(&[0.05, 0.1, 0.2, 0.4]),
        gammas.unwrap_or(&[cfg.gamma]),
        w_ds.unwrap_or(&[cfg.w_d]),
    )?;
    sweep::write_csv(out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn dump_heatmap(cfg: &ConfigArgs, head: usize, dense: bool, out: &Path) -> Result<()> {
    let cfg = cfg.resolve()?;
    let tensors = gen_synthetic(&cfg)?;
    let t = tensors.get(head).ok_or_else(|| {
        HarnessError::Config(format!("head {head} out of range (heads = {})", cfg.heads))
    })?;
    let map = if dense {
        let n = cfg.n;
        let q = DenseMatrix::new(n, cfg.d_head, t.q.data()[..n * cfg.d_head].to_vec())?;
        let k = DenseMatrix::new(n, cfg.d_head, t.k.data()[..n * cfg.d_head].to_vec())?;
        let mut s = scaled_scores(&q, &k)?;
        let flags = (0..n * n)
            .map(|e| {
                if e % n > e / n {
                    Exactness::Masked
                } else {
                    Exactness::Full
                }
            })
            .collect::<Vec<_>>();
        for (e, f) in flags.iter().enumerate() {
            if *f == Exactness::Masked {
                s.set(e / n, e % n, 0.0);
            }
        }
        ScoreMatrix::new(s, flags)?
    } else {
        run_head(&cfg, t)?.scores
    };
    create_dir(out)?;
    heatmap::write(&out.join("scores.csv"), &heatmap::scores_csv(&map.scores))?;
    heatmap::write(&out.join("exactness.csv"), &heatmap::exactness_csv(&map))?;
    println!("wrote {0}x{0} heatmaps to {1}", map.rows(), out.display());
    Ok(())
}

fn run_selftest(seed: u64) -> Result<()> {
    let checks = selftest::run_selftest(seed);
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(HarnessError::Invariant(format!(
            "{failed} self-test checks failed"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { cfg, out } => gen(cfg, out),
        Command::Run {
            cfg,
            out,
            timestamp,
            save_cache,
        } => run(cfg, out, *timestamp, *save_cache),
        Command::Sweep {
            cfg,
            thetas,
            gammas,
            w_ds,
            out,
        } => run_sweep(
            cfg,
            thetas.as_deref(),
            gammas.as_deref(),
            w_ds.as_deref(),
            out,
        ),
        Command::Heatmap {
            cfg,
            head,
            dense,
            out,
        } => dump_heatmap(cfg, *head, *dense, out),
        Command::Selftest { seed } => run_selftest(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            debug_assert!((2..=EXIT_INVARIANT).contains(&code));
            ExitCode::from(code as u8)
        }
    }
}
