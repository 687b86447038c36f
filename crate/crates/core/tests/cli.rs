use std::path::Path;
use std::process::{Command, Output};

use martingale_products::harness::{parse_csv_report, parse_json_report, run_suite, CorpusConfig};

fn mprod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mprod"))
        .args(args)
        .env_remove("MPROD_WORKERS")
        .output()
        .expect("mprod runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_writes_a_report_matching_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"depths": [4, 5], "samples": 20, "seed": 9}"#);
    let out = dir.path().join("r.csv");
    let o = mprod(&[
        "verify",
        "product-identity",
        "--config",
        &cfg,
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let from_cli = parse_csv_report(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let config = CorpusConfig {
        depths: vec![4, 5],
        samples: 20,
        seed: 9,
        ..CorpusConfig::default()
    };
    let direct = run_suite("product-identity", &config).unwrap();
    assert_eq!(from_cli.len(), direct.len());
    for (a, b) in from_cli.iter().zip(&direct) {
        assert_eq!(a.anchor, b.anchor);
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.ratio, b.ratio);
    }
}

#[test]
fn reports_are_byte_identical_across_runs_and_worker_counts() {
    let args = ["verify", "atom-bounds", "--depth", "5", "--format", "json"];
    let one = mprod(&[&args[..], &["--workers", "1"]].concat());
    let three = mprod(&[&args[..], &["--workers", "3"]].concat());
    let again = mprod(&[&args[..], &["--workers", "1"]].concat());
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(one.stdout, three.stdout);
    assert_eq!(one.stdout, again.stdout);
    let records = parse_json_report(&stdout(&one)).unwrap();
    assert!(!records.is_empty() && records.iter().all(|r| r.pass));
}

#[test]
fn seed_flag_changes_the_corpus() {
    let a = mprod(&["verify", "paraproduct-duality", "--depth", "4", "--format", "json", "--seed", "1"]);
    let b = mprod(&["verify", "paraproduct-duality", "--depth", "4", "--format", "json", "--seed", "2"]);
    assert_eq!(a.status.code(), Some(0));
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn unknown_suite_and_bad_config_exit_with_two() {
    let o = mprod(&["verify", "no-such-suite"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("product-identity"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"samples": 0}"#);
    assert_eq!(mprod(&["verify", "all", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn decompose_a_single_jump_product() {
    // f = g = ±1 on the halves of [0,1): both paraproducts vanish and the
    // whole product f·g = 1 is the variation term d₁f·d₁g.
    let dir = tempfile::tempdir().unwrap();
    let tree = write(dir.path(), "tree.json", r#"{"branching": [2], "measure": "uniform"}"#);
    let f = write(dir.path(), "f.json", "[1.0, -1.0]");
    let o = mprod(&["decompose", "--tree", &tree, "--f", &f, "--g", &f]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let value = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    assert_eq!(value("‖Π₁(f,g)‖H1"), 0.0);
    assert_eq!(value("‖Π₂(f,g)‖H1"), 0.0);
    assert_eq!(value("‖L_N(f,g)‖L1"), 1.0);
    assert_eq!(value("‖f‖H1"), 1.0);
}

#[test]
fn decompose_rejects_a_function_of_the_wrong_length() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write(dir.path(), "tree.json", r#"{"branching": [2, 2], "measure": "uniform"}"#);
    let f = write(dir.path(), "f.json", "[1.0, -1.0]");
    assert_eq!(mprod(&["decompose", "--tree", &tree, "--f", &f, "--g", &f]).status.code(), Some(2));
}

#[test]
fn dirichlet_kernel_at_a_power_of_two_is_a_scaled_indicator() {
    let o = mprod(&["kernel", "--n", "8", "--depth", "5", "--kind", "dirichlet"]);
    assert_eq!(o.status.code(), Some(0));
    let mut rows = csv::Reader::from_reader(o.stdout.as_slice());
    let values: Vec<f64> = rows.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(values.len(), 32);
    for (j, v) in values.iter().enumerate() {
        assert_eq!(*v, if j < 4 { 8.0 } else { 0.0 }, "index {j}");
    }
}

#[test]
fn fejer_spectrum_is_the_triangle_window() {
    let o = mprod(&["kernel", "--n", "4", "--depth", "3", "--spectrum"]);
    assert_eq!(o.status.code(), Some(0));
    let mut rows = csv::Reader::from_reader(o.stdout.as_slice());
    let values: Vec<f64> = rows.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    let expect = [1.0, 0.75, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0];
    for (v, e) in values.iter().zip(expect) {
        assert!((v - e).abs() < 1e-12, "{values:?}");
    }
}

#[test]
fn certify_writes_a_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cert.json");
    let o = mprod(&[
        "certify",
        "--op",
        "maximal",
        "--depths",
        "4,5",
        "--samples",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("atom-oscillation"));
    let cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(cert["rows"].as_array().unwrap().len(), 2);
}
