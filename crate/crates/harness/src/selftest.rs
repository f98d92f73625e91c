//! Built-in invariant suite behind the `selftest` subcommand.

use delta_attn::{
    build_delta_encoding, computational_sparsity, decode_step, dense_attention, prefill_attention,
    prefill_attention_ablation, prefill_window, scaled_scores, ConstructionStrategy, DeltaKVCache,
    Direction, Exactness, HybridConfig,
};

use crate::config::{ExperimentConfig, KeyProcess, Scenario};
use crate::experiment::run_experiment;
use crate::synth::{gaussian, gen_synthetic, random_walk, stream};
use crate::{cache_file, tensor_file};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs every check; the caller decides how to report failures.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    vec![
        check("zero-threshold equivalence", || zero_threshold(seed)),
        check("hold-rule bound", || hold_rule(seed)),
        check("hybrid runs pass their invariant checks", || {
            hybrid_runs(seed)
        }),
        check("strategy exactness", || strategies(seed)),
        check("prefill/decode cache consistency", || consistency(seed)),
        check("window and sparsity formulas", formulas),
        check("tensor and cache file round trips", || files(seed)),
        check("generator determinism", || determinism(seed)),
    ]
}

fn zero_threshold(seed: u64) -> Result<String, String> {
    let mut worst = 0.0f32;
    for i in 0..10u64 {
        let mut r = stream(seed, i as usize, 7);
        let (n, d) = (2 + (i as usize * 7) % 40, 2 + (i as usize * 5) % 30);
        let (q, k, v) = (
            gaussian(&mut r, n, d),
            random_walk(&mut r, n, d, 0.3),
            gaussian(&mut r, n, d),
        );
        let cfg = HybridConfig {
            theta: 0.0,
            gamma: 0.25,
            ..Default::default()
        };
        let out = prefill_attention(&q, &k, &v, &cfg).map_err(err)?.output;
        worst = worst.max(
            out.max_abs_diff(&dense_attention(&q, &k, &v, true).map_err(err)?)
                .map_err(err)?,
        );
    }
    ensure(worst <= 1e-4, || format!("max error {worst}"))?;
    Ok(format!("max error {worst:.2e}"))
}

fn hold_rule(seed: u64) -> Result<String, String> {
    for i in 0..50u64 {
        let mut r = stream(seed, i as usize, 8);
        let theta = 0.02 * (1 + i % 20) as f32;
        let k = random_walk(&mut r, 64, 8, 0.1);
        let enc = build_delta_encoding(&k, theta, Direction::TopDown).map_err(err)?;
        let rec = delta_attn::reconstruct(&enc);
        let worst = rec.max_abs_diff(&k).map_err(err)?;
        ensure(worst <= theta, || {
            format!("drift {worst} above theta {theta}")
        })?;
    }
    Ok("50 sequences".into())
}

fn hybrid_runs(seed: u64) -> Result<String, String> {
    for (theta, scenario) in [(0.05, Scenario::PrefillOnly), (0.2, Scenario::EndToEnd)] {
        let cfg = ExperimentConfig {
            seed,
            n: 48,
            d_head: 16,
            heads: 2,
            decode_steps: 8,
            theta,
            gamma: 0.25,
            scenario,
            ..Default::default()
        };
        run_experiment(&cfg, &gen_synthetic(&cfg).map_err(err)?).map_err(err)?;
    }
    Ok("prefill-only and end-to-end".into())
}

fn strategies(seed: u64) -> Result<String, String> {
    let mut r = stream(seed, 0, 9);
    let n = 10;
    let (q, k, v) = (
        gaussian(&mut r, n, 6),
        random_walk(&mut r, n, 6, 0.2),
        gaussian(&mut r, n, 6),
    );
    let exact = scaled_scores(&q, &k).map_err(err)?;
    let run = |strategy| {
        prefill_attention_ablation(
            &q,
            &k,
            &v,
            &HybridConfig {
                theta: 0.3,
                strategy,
                ..Default::default()
            },
        )
        .map_err(err)
    };
    let same = |a: f32, b: f32| a.to_bits() == b.to_bits();
    let key = run(ConstructionStrategy::TopDownKey)?;
    ensure(
        (0..n).all(|i| same(key.scores.scores.get(i, 0), exact.get(i, 0))),
        || "key column 0".into(),
    )?;
    let bottom = run(ConstructionStrategy::BottomUpQuery)?;
    ensure(
        (0..n).all(|j| same(bottom.scores.scores.get(n - 1, j), exact.get(n - 1, j))),
        || "bottom-up last row".into(),
    )?;
    let top = run(ConstructionStrategy::TopDownQuery)?;
    ensure(
        top.scores.count(Exactness::Full) == 1 && top.scores.flag(0, 0) == Exactness::Full,
        || "top-down query keeps more than (0,0)".into(),
    )?;
    Ok("column 0 / last row / (0,0)".into())
}

fn consistency(seed: u64) -> Result<String, String> {
    let mut r = stream(seed, 0, 10);
    let n = 40;
    let (q, k, v) = (
        gaussian(&mut r, n, 8),
        random_walk(&mut r, n, 8, 0.05),
        gaussian(&mut r, n, 8),
    );
    let cfg = HybridConfig::default();
    let pre = prefill_attention(&q, &k, &v, &cfg)
        .map_err(err)?
        .cache
        .ok_or("no cache")?;
    let mut streamed = DeltaKVCache::init(k.row(0), v.row(0), cfg.w_d).map_err(err)?;
    for t in 1..n {
        decode_step(q.row(t), k.row(t), v.row(t), &mut streamed, &cfg).map_err(err)?;
    }
    ensure(pre == streamed, || "caches differ".into())?;
    Ok(format!("{n} positions"))
}

fn formulas() -> Result<String, String> {
    let w = prefill_window(16, 0.25, 64).map_err(err)?;
    ensure(w == 4, || format!("window {w}"))?;
    let s = computational_sparsity(0.8, 4, 16);
    ensure(s == 0.6, || format!("s_c {s}"))?;
    Ok("window 4, s_c 0.6".into())
}

fn files(seed: u64) -> Result<String, String> {
    let m = gaussian(&mut stream(seed, 0, 11), 7, 5);
    let t = tensor_file::Tensor::from_matrix(&m);
    let back = tensor_file::decode(&tensor_file::encode(&t)).map_err(err)?;
    ensure(back == t, || "tensor differs".into())?;
    let mut cache = DeltaKVCache::empty(5, 3).map_err(err)?;
    for row in m.iter_rows() {
        cache.push_token(row, row, 0.5).map_err(err)?;
    }
    let back = cache_file::decode(&cache_file::encode(&cache)).map_err(err)?;
    ensure(back == cache, || "cache differs".into())?;
    Ok("bit-identical".into())
}

fn determinism(seed: u64) -> Result<String, String> {
    let cfg = ExperimentConfig {
        seed,
        n: 16,
        d_head: 4,
        heads: 3,
        key_process: KeyProcess::RandomWalk,
        ..Default::default()
    };
    ensure(
        gen_synthetic(&cfg).map_err(err)? == gen_synthetic(&cfg).map_err(err)?,
        || "two generations differ".into(),
    )?;
    Ok("identical tensors".into())
}
