//! End-to-end checks of the command-line interface: exit codes, file
//! round-trips, flag coverage in help output, and seed reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_eows")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn eows")
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("eows-cli-test-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_sinusoid_round_trips() {
    let dir = tempdir("gen");
    let out = dir.join("s.eows");
    let res = run(&["gen", "--signal", "sinusoid", "--n", "64", "--seed", "7", "--out", path_str(&out)]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let m = eows::matcore::io::read_matrix(&out).unwrap();
    assert_eq!((m.rows(), m.cols()), (64, 128));
}

#[test]
fn gen_is_bit_reproducible_per_seed() {
    let dir = tempdir("repro");
    let a = dir.join("a.eows");
    let b = dir.join("b.eows");
    for out in [&a, &b] {
        let res = run(&[
            "gen", "--signal", "sinusoid", "--n", "32", "--seed", "123", "--noise", "type1",
            "--out", path_str(out),
        ]);
        assert!(res.status.success());
    }
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn text_format_selected_by_extension() {
    let dir = tempdir("text");
    let out = dir.join("s.txt");
    let res = run(&["gen", "--signal", "sinusoid", "--n", "16", "--seed", "1", "--out", path_str(&out)]);
    assert!(res.status.success());
    let content = std::fs::read_to_string(&out).unwrap();
    assert!(content.starts_with("16 32\n"));
    let m = eows::matcore::io::read_matrix(&out).unwrap();
    assert_eq!((m.rows(), m.cols()), (16, 32));
}

#[test]
fn denoise_missing_input_is_exit_code_one() {
    let dir = tempdir("missing");
    let res = run(&[
        "denoise",
        "--in",
        path_str(&dir.join("missing.eows")),
        "--out",
        path_str(&dir.join("out.eows")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("read input"), "stderr: {err}");
}

#[test]
fn denoise_writes_matrix_and_sidecar() {
    let dir = tempdir("denoise");
    let input = dir.join("y.eows");
    let res = run(&[
        "gen", "--signal", "sinusoid", "--n", "48", "--seed", "3", "--noise", "type1", "--out",
        path_str(&input),
    ]);
    assert!(res.status.success());
    let out = dir.join("shat.eows");
    let res = run(&[
        "denoise", "--in", path_str(&input), "--out", path_str(&out), "--method", "eoptshrink",
        "--loss", "fro",
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let m = eows::matcore::io::read_matrix(&out).unwrap();
    assert_eq!((m.rows(), m.cols()), (48, 96));
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("shat.json")).unwrap()).unwrap();
    assert!(sidecar.get("r_hat").is_some());
    assert!(sidecar.get("lambda_plus_hat").is_some());
    assert!(sidecar.get("spikes").is_some());
}

#[test]
fn tree_and_transform_round_trip() {
    let dir = tempdir("tree");
    let input = dir.join("y.eows");
    assert!(run(&[
        "gen", "--signal", "sinusoid", "--n", "16", "--seed", "5", "--noise", "type1", "--out",
        path_str(&input),
    ])
    .status
    .success());
    let rows = dir.join("rows.json");
    let cols = dir.join("cols.json");
    for (axis, out) in [("rows", &rows), ("cols", &cols)] {
        let res = run(&[
            "tree", "--in", path_str(&input), "--axis", axis, "--iters", "1", "--out",
            path_str(out),
        ]);
        assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    }
    // The emitted JSON parses back into a valid tree.
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&rows).unwrap()).unwrap();
    let tree = eows::treegeo::PartitionTree::from_json(&v).unwrap();
    assert_eq!(tree.n_leaves(), 16);

    let coeffs = dir.join("coeffs.json");
    let res = run(&[
        "transform", "--in", path_str(&input), "--rows", path_str(&rows), "--cols",
        path_str(&cols), "--ell", "1.0", "--out", path_str(&coeffs),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&coeffs).unwrap()).unwrap();
    let tiles = v.get("tiles").and_then(|t| t.as_array()).unwrap();
    assert_eq!(tiles.len(), 16 * 32);
    assert!(tiles[0].get("row_atom").is_some());
    assert!(tiles[0].get("col_atom").is_some());
    assert!(tiles[0].get("value").is_some());
}

#[test]
fn simulate_writes_expected_row_count() {
    let dir = tempdir("simulate");
    let out = dir.join("r.csv");
    let res = run(&[
        "simulate", "--signal", "sinusoid", "--noise", "type1", "--n", "128", "--trials", "2",
        "--methods", "eoptshrink", "--seed", "9", "--out", path_str(&out),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + 2 data rows, got {csv}");
    assert_eq!(lines[0], "n,method,trial,mse,left_inner,right_inner,r_hat,seed");
    assert!(dir.join("r.json").exists());
}

#[test]
fn help_lists_documented_flags() {
    let denoise = String::from_utf8(run(&["denoise", "--help"]).stdout).unwrap();
    for flag in
        ["--method", "--loss", "--sigma", "--tree-source", "--ell", "--iters", "--in", "--out"]
    {
        assert!(denoise.contains(flag), "denoise --help missing {flag}");
    }
    let simulate = String::from_utf8(run(&["simulate", "--help"]).stdout).unwrap();
    for flag in ["--signal", "--noise", "--n", "--trials", "--methods", "--out", "--seed"] {
        assert!(simulate.contains(flag), "simulate --help missing {flag}");
    }
    let gen = String::from_utf8(run(&["gen", "--help"]).stdout).unwrap();
    for flag in ["--signal", "--n", "--seed", "--out"] {
        assert!(gen.contains(flag), "gen --help missing {flag}");
    }
    // Unknown flags are rejected.
    let res = run(&["gen", "--signal", "sinusoid", "--n", "16", "--bogus", "1"]);
    assert!(!res.status.success());
}
