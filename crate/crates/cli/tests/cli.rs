use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_perturb-lab");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("PERTURB_LAB_SEED")
        .output()
        .unwrap()
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn toy(dir: &Path, n: &str) {
    let out = run(dir, &["gen-toy", "--n", n, "--seed", "3", "--out", "toy.tsv"]);
    assert!(out.status.success());
}

const QUICK: &[&str] = &["--set", "epochs=3", "--set", "runs_per_point=1", "--runs", "2"];

#[test]
fn verify_passes_and_lists_groups() {
    let out = run(Path::new("."), &["verify", "--instances", "20"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    let groups: std::collections::BTreeSet<&str> = text
        .lines()
        .filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]"))
        .map(|l| l[7..].split('/').next().unwrap())
        .collect();
    assert!(groups.len() >= 6, "{groups:?}");
    assert!(text.contains("tolerance"));
}

#[test]
fn experiment_writes_csv_table_and_config() {
    let dir = scratch("experiment");
    toy(&dir, "120");
    let mut args = vec!["experiment", "--dataset", "toy.tsv", "--strategies", "gaussian,bernoulli", "--out", "out/r.csv"];
    args.extend_from_slice(QUICK);
    let out = run(&dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("out/r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,p,sigma,mean,std,min,max,n_runs");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("none,,,"));
    let table = fs::read_to_string(dir.join("out/r.txt")).unwrap();
    assert!(table.contains("# resolved configuration"));
    let config = fs::read_to_string(dir.join("out/r.config")).unwrap();
    assert!(table.ends_with(&config));
    assert!(config.contains("strategies = gaussian,bernoulli"));
}

#[test]
fn sweep_is_long_format_and_sorted() {
    let dir = scratch("sweep");
    toy(&dir, "150");
    let mut args = vec![
        "sweep", "--dataset", "toy.tsv", "--strategies", "gaussian,word_dropout", "--fractions",
        "1.0,0.1,0.5", "--out", "s.csv",
    ];
    args.extend_from_slice(QUICK);
    let out = run(&dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("s.csv")).unwrap();
    let keys: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (it.next().unwrap().to_owned(), it.next().unwrap().to_owned())
        })
        .collect();
    assert_eq!(csv.lines().next().unwrap(), "fraction,strategy,mean,std");
    assert_eq!(keys.len(), 9);
    let fractions: Vec<&str> = keys.iter().map(|k| k.0.as_str()).collect();
    assert_eq!(fractions, ["0.1", "0.1", "0.1", "0.5", "0.5", "0.5", "1", "1", "1"]);
    assert_eq!(keys[0].1, "none");
    assert_eq!(keys[1].1, "gaussian");
    assert_eq!(keys[2].1, "word_dropout");
}

#[test]
fn config_errors_name_the_key() {
    let dir = scratch("config");
    toy(&dir, "50");
    fs::write(dir.join("bad.conf"), "dataset = toy.tsv\nstrategies = bernoulli\np = 1.5\n").unwrap();
    let out = run(&dir, &["experiment", "--config", "bad.conf"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`p`"));

    let out = run(&dir, &["experiment", "--dataset", "missing.tsv", "--strategies", "gaussian"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`dataset`"));

    let out = run(&dir, &["experiment", "--dataset", "toy.tsv", "--strategies", "gaussian", "--set", "colour=red"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`colour`"));
}

#[test]
fn flags_override_config_and_env_seed_is_fallback() {
    let dir = scratch("precedence");
    toy(&dir, "60");
    fs::write(dir.join("c.conf"), "dataset = toy.tsv\nstrategies = gaussian\nsigma = 0.1\nepochs = 2\nruns = 1\nruns_per_point = 1\n").unwrap();
    let out = Command::new(BIN)
        .args(["experiment", "--config", "c.conf", "--sigma", "0.01", "--out", "p.csv"])
        .current_dir(&dir)
        .env("PERTURB_LAB_SEED", "777")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = fs::read_to_string(dir.join("p.config")).unwrap();
    assert!(config.contains("sigma = 0.01\n"));
    assert!(config.contains("seed = 777\n"));
}

#[test]
fn failure_flushes_partial_csv() {
    let dir = scratch("failure");
    toy(&dir, "60");
    let out = run(
        &dir,
        &[
            "experiment", "--dataset", "toy.tsv", "--strategies", "gaussian", "--set", "lr=1e300",
            "--set", "epochs=2", "--out", "f.csv",
        ],
    );
    assert!(!out.status.success());
    let csv = fs::read_to_string(dir.join("f.csv")).unwrap();
    assert_eq!(
        csv,
        "strategy,p,sigma,mean,std,min,max,n_runs\nnone,FAILED,,,,,,0\n"
    );
}

#[test]
fn gen_toy_is_deterministic() {
    let dir = scratch("toy");
    run(&dir, &["gen-toy", "--n", "40", "--seed", "1", "--out", "a.tsv"]);
    run(&dir, &["gen-toy", "--n", "40", "--seed", "1", "--out", "b.tsv"]);
    assert_eq!(fs::read(dir.join("a.tsv")).unwrap(), fs::read(dir.join("b.tsv")).unwrap());
    assert!(!run(&dir, &["gen-toy", "--n", "5", "--out", "c.tsv"]).status.success());
}
