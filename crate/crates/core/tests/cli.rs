use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ris_sim::harness::{parse_csv, parse_json, parse_scenario, Module, ScenarioSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ris-sim"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn reference_file_matches_defaults() {
    let text = std::fs::read_to_string(scenario("reference.toml")).unwrap();
    let spec = parse_scenario(&text).unwrap();
    assert_eq!(spec, ScenarioSpec::new("reference", Module::ALL.to_vec()));
}

#[test]
fn sweep_csv_and_json_agree() {
    let path = scenario("quick.toml");
    let path = path.to_str().unwrap();
    let csv = run(&["sweep", "--scenario", path]);
    assert!(
        csv.status.success(),
        "{}",
        String::from_utf8_lossy(&csv.stderr)
    );
    let json = run(&["sweep", "--scenario", path, "--format", "json"]);
    assert!(json.status.success());
    let a = parse_csv(std::str::from_utf8(&csv.stdout).unwrap()).unwrap();
    let b = parse_json(std::str::from_utf8(&json.stdout).unwrap()).unwrap();
    assert_eq!(a, b);
    for m in Module::ALL {
        assert!(
            a.iter().any(|r| r.module == m.name()),
            "no {} records",
            m.name()
        );
    }
    let again = run(&["sweep", "--scenario", path]);
    assert_eq!(csv.stdout, again.stdout);
}

#[test]
fn seed_range_and_scheme_flags() {
    let out = run(&[
        "localize", "--seed", "7", "--seeds", "3", "--cycles", "2", "--scheme", "greedy",
    ]);
    assert!(out.status.success());
    let records = parse_csv(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(seeds, vec![7, 8, 9]);
    assert!(records
        .iter()
        .all(|r| r.scheme == "greedy" && (1..=2).contains(&r.cycle)));
}

#[test]
fn out_dir_receives_named_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "radar",
        "--cycles",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(dir.path().join("radar.json")).unwrap();
    assert!(!parse_json(&text).unwrap().is_empty());
}

#[test]
fn validation_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "id = \"b\"\nmodules = [\"radar\"]\n[radar]\nnoise_power = -2.0\n",
    )
    .unwrap();
    let out = run(&["radar", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("radar.noise_power"));

    std::fs::write(&bad, "id = \"b\"\nmodules = [\"radar\"]\nnoise = 1\n").unwrap();
    let out = run(&["sweep", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise"));

    assert_eq!(run(&["slam", "--scheme", "best"]).status.code(), Some(1));
    assert_eq!(run(&["slam", "--format", "xml"]).status.code(), Some(1));
    assert_eq!(run(&["teleport"]).status.code(), Some(1));
    assert_eq!(run(&["sweep", "--scheme", "random"]).status.code(), Some(1));
    assert_eq!(
        run(&["radar", "--scenario", "/nonexistent/file.toml"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = run(&["radar", "--cycles", "1", "--out", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    assert!(run(&["--help"]).status.success());
}
