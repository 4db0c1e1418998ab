use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groupgrad"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_twice_gives_identical_csv() {
    let cfg = configs().join("toy_live.conf");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = run(&[
            "run",
            "--config",
            path_str(&cfg),
            "--seed",
            "11",
            "--out",
            path_str(dir.path()),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv_a = fs::read(a.path().join("toy_live.csv")).unwrap();
    let csv_b = fs::read(b.path().join("toy_live.csv")).unwrap();
    assert!(!csv_a.is_empty());
    assert_eq!(csv_a, csv_b);
    assert!(a.path().join("toy_live.summary.json").exists());
}

#[test]
fn sweep_writes_one_run_per_value() {
    let cfg = configs().join("toy_live.conf");
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        "--config",
        path_str(&cfg),
        "--field",
        "G",
        "--values",
        "2,4,8,16",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csvs: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 4);
    assert!(dir.path().join("toy_live_sweep_G.json").exists());
}

#[test]
fn compare_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = configs().join("toy_gspo_seq.conf");
    let b = configs().join("toy_dfpo_min_replace.conf");
    let out = run(&[
        "compare",
        "--config",
        path_str(&a),
        path_str(&b),
        "--out",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_passes() {
    let out = run(&["verify"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(
        &bad,
        "scenario = toy_unified\nestimator = gspo_seq\neta = -1\nsteps = 3\n",
    )
    .unwrap();
    let out = run(&["run", "--config", path_str(&bad), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(
        &bad,
        "scenario = toy_unified\nestimator = gspo_seq\neta = 0.1\nsteps = 3\nbogus = 1\n",
    )
    .unwrap();
    let out = run(&["run", "--config", path_str(&bad), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn list_scenarios_names_all_three() {
    let out = run(&["list-scenarios"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["toy_unified", "minimal_prefix", "clip_break"] {
        assert!(text.contains(name), "{text}");
    }
}
