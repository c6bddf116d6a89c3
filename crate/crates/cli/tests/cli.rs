use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfbsde")).args(args).current_dir(dir).output().expect("binary runs")
}

fn manifest(out: &Path) -> Value {
    let text = std::fs::read_to_string(out.join("manifest.json")).expect("manifest written");
    serde_json::from_str(&text).expect("manifest is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn solve_writes_solution_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "e31.toml", "problem = \"example_3_1\"\nparticles = 400\n[grid]\nsteps = 20\n");
    let o = run(&["solve", "--config", &cfg, "--out", "run", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("run");
    assert!(out.join("solution_means.csv").exists());
    assert!(out.join("config.toml").exists());
    let m = manifest(&out);
    assert_eq!(m["status"], "Solved");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["exit_code"], 0);
    assert!(m["generator"].as_str().is_some());
    assert!(m["wall_time_seconds"].as_f64().is_some());
}

#[test]
fn identical_config_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write(dir.path(), "e31.toml", "problem = \"example_3_1\"\nparticles = 300\nseed = 11\n[grid]\nsteps = 16\n");
    for out in ["a", "b"] {
        let o = run(&["solve", "--config", &cfg, "--out", out], dir.path());
        assert_eq!(o.status.code(), Some(0));
    }
    for file in ["solution_means.csv", "residuals.csv"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "e31.toml", "problem = \"example_3_1\"\nparticles = 300\n[grid]\nsteps = 12\n");
    assert_eq!(run(&["solve", "--config", &cfg, "--out", "a", "--seed", "5"], dir.path()).status.code(), Some(0));
    let echoed = dir.path().join("a").join("config.toml");
    let echoed = echoed.to_string_lossy().into_owned();
    assert_eq!(run(&["solve", "--config", &echoed, "--out", "b"], dir.path()).status.code(), Some(0));
    let a = std::fs::read(dir.path().join("a/solution_means.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/solution_means.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "problem = \"lq\"\n[grid]\nsteps = 10\nhorizn = 2.0\n");
    let o = run(&["lq", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ConfigParse") && err.contains("horizn"), "{err}");

    let cfg = write(dir.path(), "syntax.toml", "problem = \n");
    let o = run(&["lq", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ConfigParse"));
}

#[test]
fn unknown_problem_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.toml", "problem = \"heston\"\n");
    let o = run(&["solve", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("UnknownProblem"));
}

#[test]
fn solver_errors_exit_one_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    // solve is for the uncontrolled examples
    let cfg = write(dir.path(), "p.toml", "problem = \"portfolio\"\n");
    let o = run(&["solve", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let m = manifest(&dir.path().join("run"));
    assert_eq!(m["status"], "Error");
    assert!(m["summary"]["message"].as_str().unwrap().contains("control problem"));
}

#[test]
fn check_mono_certifies_the_solvable_example() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["check-mono", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&dir.path().join("run"));
    assert_eq!(m["summary"]["certificate"]["condition_set"], "H32-case1");
}

#[test]
fn empty_sweep_gives_empty_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "problem = \"example_3_1\"\nparticles = 200\n[grid]\nsteps = 10\n[options]\nalphas = []\n",
    );
    let o = run(&["sweep-alpha", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let m = manifest(&dir.path().join("run"));
    assert_eq!(m["summary"]["rows"], Value::Array(vec![]));
    let csv = std::fs::read_to_string(dir.path().join("run/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn nonsolvable_demo_inverts_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["nonsolvable-demo", "--out", "run", "--particles", "300", "--steps", "25"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&dir.path().join("run"));
    assert_eq!(m["status"], "Unsolvable");
    let gaps = m["summary"]["reduced_terminal_gap"]["y_plus_x_at_T"].as_array().unwrap();
    for g in gaps {
        assert!((g.as_f64().unwrap().abs() - 2f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn portfolio_and_lq_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "pf.toml",
        "problem = \"portfolio\"\nparticles = 400\n[grid]\nsteps = 10\n[options]\ndirections = 2\nriccati_steps = 500\n",
    );
    let o = run(&["portfolio", "--config", &cfg, "--out", "pf"], dir.path());
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["riccati.csv", "optimality_gap.csv", "closed_form_checks.json", "manifest.json"] {
        assert!(dir.path().join("pf").join(f).exists(), "{f}");
    }
    let m = manifest(&dir.path().join("pf"));
    assert!(m["summary"]["foc_max_residual"].as_f64().unwrap() < 1e-10);

    let cfg = write(
        dir.path(),
        "lq.toml",
        "problem = \"lq\"\nparticles = 400\n[grid]\nsteps = 10\n[options]\ndirections = 2\nriccati_steps = 500\n[options.fixed_point]\ntol = 1e-4\n",
    );
    let o = run(&["lq", "--config", &cfg, "--out", "lq"], dir.path());
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(dir.path().join("lq/optimality_gap.csv")).unwrap();
    // 2 directions, their negatives, 2 step sizes
    assert_eq!(rows.lines().count(), 1 + 8);
}

#[test]
fn quick_selftest_reports_every_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "problem = \"example_3_1\"\n");
    let o = run(&["selftest", "--config", &cfg, "--out", "run"], dir.path());
    assert!(matches!(o.status.code(), Some(0) | Some(2)));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 11, "{stdout}");
}
