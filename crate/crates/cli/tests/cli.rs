use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smp-spde"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let out = run(&[]);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_subcommand_and_flag_fail() {
    assert!(!run(&["frobnicate"]).status.success());
    assert!(!run(&["cost", "--config", "linear", "--width", "3"]).status.success());
}

#[test]
fn missing_config_fails() {
    let out = run(&["cost"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("cubic.toml");
    let cfg = cfg.to_str().unwrap();
    for (sub, threads) in [("a", "1"), ("b", "4")] {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "simulate", "--config", cfg, "--seed", "7", "--paths", "3", "--threads", threads,
            "--out", out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["path_0000.csv", "path_0001.csv", "path_0002.csv", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn persisted_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = run(&["cost", "--config", "burgers", "--seed", "3", "--paths", "20", "--out", first.to_str().unwrap()]);
    assert!(out.status.success());
    let copy = first.join("config.toml");
    let second = dir.path().join("second");
    let out = run(&["cost", "--config", copy.to_str().unwrap(), "--seed", "3", "--paths", "20", "--out", second.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(first.join("cost.json")).unwrap(),
        std::fs::read(second.join("cost.json")).unwrap()
    );
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(second.join("config.toml")).unwrap());
}

#[test]
fn invalid_config_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[space]\nn_modes = 4\n\n[cost]\nq = 1.0\nqq = 2.0\n").unwrap();
    let out = run(&["cost", "--config", bad.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("line 6") && text.contains("qq"), "{text}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn json_output_and_env_output_root() {
    let root = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["grad-check", "--config", "cubic", "--paths", "4", "--json"])
        .env("SMP_SPDE_OUT", root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    let run_dir = PathBuf::from(v["run_dir"].as_str().unwrap());
    assert!(run_dir.starts_with(root.path()));
    assert!(run_dir.join("config.toml").exists() && run_dir.join("grad_check.json").exists());
}

#[test]
fn optimize_writes_its_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("clipped_lq.toml");
    let out = run(&["optimize", "--config", cfg.to_str().unwrap(), "--paths", "32", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let log = std::fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
    assert!(log.starts_with("iter,cost,std_err,step,smp_residual\n"));
    assert!(dir.path().join("control.csv").exists());
}

#[test]
fn verify_failing_suite_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    std::fs::write(
        &suite,
        "[[experiment]]\nname = \"duality\"\nlabel = \"forced\"\nproblem = \"linear\"\nn_modes = 4\nn_steps = 20\npaths = 4\ntolerance = 0.0\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["verify", "--config", suite.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["failed"], serde_json::json!(["forced"]));
    assert!(out_dir.join("forced/report.json").exists());
    assert!(out_dir.join("suite.toml").exists());
}

#[test]
fn verify_shipped_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let suite = configs().join("suite.toml");
    let out = run(&["verify", "--config", suite.to_str().unwrap(), "--threads", "4", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
