use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[protocol]
images_per_class = 10

[model]
steps_per_class = 20
pixels_per_image = 48

[helper]
steps_per_class = 20
pixels_per_image = 48

[replay]
n_r = 6
pool_size = 150
shortfall_floor = 1

[selection]
bootstrap_pool_per_class = 12

[selection.discriminator]
epochs = 3

[eval]
test_size = 16
"#;

fn replayseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replayseg")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_reports_and_report_merges_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let out = replayseg(&["run", &cfg, "--method", "ft", "--method", "recall+", "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "per_class.csv", "metrics.txt", "config.toml", "filter_audit.csv", "replay/replay.csv"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("recall+") && stdout.contains("delta"));

    let b = dir.path().join("b");
    let out = replayseg(&[
        "run", &cfg, "--method", "joint", "--seed", "4", "--mode", "overlapped", "--out", b.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(b.join("config.toml")).unwrap().contains("overlapped"));

    let merged = dir.path().join("merged");
    let out = replayseg(&[
        "report",
        a.to_str().unwrap(),
        b.join("metrics.csv").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = fs::read_to_string(merged.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
}

#[test]
fn ablate_writes_a_toggle_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("abl");
    let out = replayseg(&["ablate", &cfg, "--matrix", "pool", "--pools", "50,150", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().next().unwrap().contains("pool"));
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    for args in [
        vec!["run", bad.to_str().unwrap()],
        vec!["run", "--protocol", "4-x", "--out", dir.path().to_str().unwrap()],
        vec!["report", dir.path().join("missing.csv").to_str().unwrap()],
    ] {
        let out = replayseg(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
    let out = replayseg(&["run", "--method", "bogus"]);
    assert!(!out.status.success());
}
