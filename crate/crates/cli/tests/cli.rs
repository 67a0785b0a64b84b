use std::fs;
use std::process::{Command, Output};

fn discsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discsim")).args(args).output().expect("spawn discsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lists_families_and_regimes() {
    let out = discsim(&["list-regimes"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in
        ["e1", "probes", "stable", "combined-critical", "maint-dense-gossip", "stable+zipf", "ablation-v50-s2-5"]
    {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn exports_one_table_per_catalog_regime() {
    let out = discsim(&["export-catalog"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).matches("[[regime]]").count(), 19);
}

#[test]
fn single_regime_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("patch.toml");
    fs::write(&cfg, "horizon = 40\nwarmup = 10\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = discsim(&[
        "run",
        "Cooling Moderate",
        "--desk",
        "--seed",
        "7",
        "--overlay",
        "kademlia",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("cooling-moderate"));
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 2);
    assert!(runs.lines().nth(1).unwrap().starts_with("cooling-moderate,kademlia,7,"));
    assert!(out_dir.join("requests.csv").exists());
    assert!(out_dir.join("aggregate.json").exists());
}

#[test]
fn rejects_unknown_targets_and_bad_overrides() {
    assert!(!discsim(&["run", "no-such-regime"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "horizon_cycles = 40\n").unwrap();
    let out =
        discsim(&["run", "stable", "--desk", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
