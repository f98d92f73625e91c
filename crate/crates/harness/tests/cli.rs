use std::path::Path;
use std::process::{Command, Output};

use delta_attn::Exactness;
use delta_attn_harness::heatmap::parse_exactness_csv;
use delta_attn_harness::tensor_file;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delta-attn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn delta-attn")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        bin(d, &["run", "--n", "8", "--heads", "1", "--out", "ok"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        bin(d, &["run", "--gamma", "1.5", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bin(d, &["run", "--bogus", "--out", "x"]).status.code(),
        Some(2)
    );
    std::fs::write(d.join("bad.toml"), "thetta = 0.1\n").unwrap();
    assert_eq!(
        bin(d, &["run", "--config", "bad.toml", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bin(d, &["run", "--config", "missing.toml", "--out", "x"])
            .status
            .code(),
        Some(3)
    );
    std::fs::write(d.join("junk.dtns"), b"NOPE").unwrap();
    let junk = bin(
        d,
        &[
            "run",
            "--key-process",
            "file",
            "--key-file",
            "junk.dtns",
            "--out",
            "x",
        ],
    );
    assert_eq!(junk.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&junk.stderr).contains("magic"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("c.toml"),
        "n = 16\ngamma = 0.25\ntheta = 0.3\nheads = 1\nd_head = 8\n",
    )
    .unwrap();
    let out = bin(
        d,
        &[
            "run", "--config", "c.toml", "--theta", "0.05", "--d_head", "4", "--out", "r",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json(&d.join("r/report.json"));
    assert_eq!(r["config"]["theta"], 0.05);
    assert_eq!(r["config"]["d_head"], 4);
    assert_eq!(r["config"]["n"], 16);
    assert_eq!(r["prefill"]["window"], 4);
    assert!(r["metadata"].get("timestamp_unix").is_none());
    let outputs = tensor_file::load(&d.join("r/outputs.dtns")).unwrap();
    assert_eq!(outputs.dims, vec![1, 16, 4]);
}

#[test]
fn timestamp_only_in_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["run", "--n", "12", "--heads", "2", "--out"];
    assert!(bin(d, &[&args[..], &["a"]].concat()).status.success());
    assert!(bin(d, &[&args[..], &["b", "--timestamp"]].concat())
        .status
        .success());
    let mut a = json(&d.join("a/report.json"));
    let mut b = json(&d.join("b/report.json"));
    assert!(b["metadata"]["timestamp_unix"].is_u64());
    a["metadata"]
        .as_object_mut()
        .unwrap()
        .remove("timestamp_unix");
    b["metadata"]
        .as_object_mut()
        .unwrap()
        .remove("timestamp_unix");
    assert_eq!(a, b);
}

#[test]
fn generated_keys_feed_back_in() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let shape = [
        "--n", "20", "--heads", "2", "--d-head", "6", "--sigma", "0.1",
    ];
    assert!(bin(d, &[&["gen", "--out", "g"], &shape[..]].concat())
        .status
        .success());
    let k = tensor_file::load(&d.join("g/k.dtns")).unwrap();
    assert_eq!(k.dims, vec![2, 20, 6]);
    assert!(bin(d, &[&["run", "--out", "direct"], &shape[..]].concat())
        .status
        .success());
    let from_file = [
        &[
            "run",
            "--out",
            "file",
            "--key-process",
            "file",
            "--key-file",
            "g/k.dtns",
        ],
        &shape[..],
    ]
    .concat();
    assert!(bin(d, &from_file).status.success());
    assert_eq!(
        json(&d.join("direct/report.json"))["prefill"],
        json(&d.join("file/report.json"))["prefill"]
    );
    let wrong = [
        &[
            "run",
            "--out",
            "w",
            "--key-process",
            "file",
            "--key-file",
            "g/k.dtns",
        ],
        &shape[..],
        &["--n", "19"],
    ]
    .concat();
    assert_eq!(bin(d, &wrong).status.code(), Some(2));
}

#[test]
fn heatmap_grids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin(
        d,
        &[
            "heatmap", "--n", "4", "--gamma", "0.1", "--heads", "1", "--out", "h",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(d.join("h/exactness.csv")).unwrap();
    assert_eq!(text, "2,0,0,0\n1,2,0,0\n1,1,2,0\n1,1,1,2\n");
    assert!(bin(
        d,
        &["heatmap", "--n", "6", "--heads", "1", "--dense", "--out", "dense"]
    )
    .status
    .success());
    let (n, _, flags) =
        parse_exactness_csv(&std::fs::read_to_string(d.join("dense/exactness.csv")).unwrap())
            .unwrap();
    for (e, f) in flags.iter().enumerate() {
        let want = if e % n > e / n {
            Exactness::Masked
        } else {
            Exactness::Full
        };
        assert_eq!(*f, want);
    }
    assert_eq!(
        bin(d, &["heatmap", "--heads", "1", "--head", "3", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn sweep_rows_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin(
        d,
        &[
            "sweep",
            "--n",
            "24",
            "--heads",
            "1",
            "--d-head",
            "8",
            "--thetas",
            "0.05,0.1,0.2",
            "--gammas",
            "0.1,0.25",
            "--out",
            "s.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert_eq!(
        text.lines().next().unwrap(),
        delta_attn_harness::sweep::HEADER
    );
}

#[test]
fn end_to_end_caches_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin(
        d,
        &[
            "run",
            "--scenario",
            "end-to-end",
            "--n",
            "20",
            "--decode-steps",
            "5",
            "--heads",
            "2",
            "--save-cache",
            "--out",
            "e",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cache = delta_attn_harness::cache_file::load(&d.join("e/cache_h1.dkvc")).unwrap();
    assert_eq!(cache.len(), 25);
    let r = json(&d.join("e/report.json"));
    assert_eq!(r["decode"]["n"], 25);
    assert_eq!(
        r["per_head"][1]["cache_memory"]["dense_equivalent"],
        25 * 32
    );
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["selftest", "--seed", "11"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
