use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_balance-lab"));
    c.env_remove("BALANCE_LAB_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

const SHORT_RUN: &str = "iterations = 1200\ncycle_len = 200\neval_samples = 500\nclf_epochs = 30\n";

#[test]
fn verify_theory_defaults_pass_and_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["verify-theory", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("theory/theory.csv")).unwrap();
    assert!(csv.starts_with("trial,K,max_bound_violation,prop2_residual,oracle_linf"));
    assert_eq!(csv.lines().count(), 1001);
    assert!(!csv.contains('\r'));
}

#[test]
fn verify_theory_two_classes_runs_bound_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-theory", "--trials", "100", "--k-min", "2", "--k-max", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn verify_theory_zero_tolerance_is_a_verification_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-theory", "--trials", "50", "--tol", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let csv = fs::read_to_string(dir.path().join("theory/theory.csv")).unwrap();
    assert!(csv.lines().skip(1).any(|l| l.contains(",false,")));
}

#[test]
fn invalid_trials_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-theory", "--trials", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trials"));
}

#[test]
fn missing_kind_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "lambda = 5\n");
    let o = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`kind`"), "{}", stderr(&o));
}

#[test]
fn bad_values_name_their_key() {
    let dir = tempfile::tempdir().unwrap();
    for (line, key) in [("alpha = 1.5", "alpha"), ("rho = 0.5", "rho"), ("colour = red", "colour")] {
        let cfg = write_cfg(dir.path(), "c.cfg", &format!("kind = train\n{line}\n"));
        let o = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{line}");
        assert!(stderr(&o).contains(&format!("`{key}`")), "{line}: {}", stderr(&o));
    }
}

#[test]
fn regularized_run_ranks_ahead_of_baseline_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let base = write_cfg(dir.path(), "base.cfg", &format!("kind = train\nlambda = 0\n{SHORT_RUN}"));
    let reg = write_cfg(dir.path(), "reg.cfg", &format!("kind = train\nlambda = 5\n{SHORT_RUN}"));
    for cfg in [&base, &reg] {
        let o = bin()
            .args(["train", "--config", cfg, "--seed", "3"])
            .env("BALANCE_LAB_OUT", &root)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let run_dir = root.join("train-seed3");
    for f in ["metrics.csv", "config.txt", "summary.csv", "class_fracs.svg", "kl_uniform.svg", "frechet.svg"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    assert!(run_dir.join("checkpoint/generator_ema/params.txt").is_file());
    let svg = fs::read_to_string(run_dir.join("class_fracs.svg")).unwrap();
    assert!(svg.contains("<!-- config-hash: "));

    let o = bin().args(["report"]).env("BALANCE_LAB_OUT", &root).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(root.join("report.csv")).unwrap();
    let ranked: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ranked, ["train-seed3", "baseline-seed3"]);

    let first = fs::read(run_dir.join("metrics.csv")).unwrap();
    let again = dir.path().join("again");
    let o = run(&["train", "--config", &reg, "--seed", "3", "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, fs::read(again.join("train-seed3/metrics.csv")).unwrap());
}

#[test]
fn baseline_subcommand_forces_zero_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "kind = train\nlambda = 5\niterations = 200\ncycle_len = 100\neval_samples = 200\nclf_epochs = 5\n");
    let o = run(&["baseline", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg_text = fs::read_to_string(dir.path().join("baseline-seed0/config.txt")).unwrap();
    assert!(cfg_text.lines().any(|l| l == "lambda=0.0"), "{cfg_text}");
    assert!(cfg_text.lines().any(|l| l == "kind=baseline"), "{cfg_text}");
}

#[test]
fn failed_sweep_member_is_recorded_and_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "c.cfg",
        "kind = cycle-length\nsweep_values = 100,abc\niterations = 200\neval_samples = 200\nclf_epochs = 5\n",
    );
    let o = run(&["sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sweep-cycle-length/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("100,0,") && rows[0].ends_with(','), "{}", rows[0]);
    assert!(rows[1].starts_with("abc,0,") && rows[1].contains("sweep_values"), "{}", rows[1]);
    assert!(dir.path().join("sweep-cycle-length/sweep.svg").is_file());
}

#[test]
fn report_without_runs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
