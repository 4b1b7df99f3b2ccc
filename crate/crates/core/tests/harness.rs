use std::path::{Path, PathBuf};

use smp_spde::harness::{run_experiment, run_suite, ExperimentKind, ExperimentSpec, SuiteSpec};
use smp_spde::Error;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn empty_suite_passes() {
    let suite = SuiteSpec::parse("").unwrap();
    let out = run_suite(&suite, false);
    assert!(out.outcomes.is_empty());
    assert!(out.pass());
}

#[test]
fn zero_tolerance_fails_and_names_experiment() {
    let text = r#"
[[experiment]]
name = "duality"
problem = "linear"
n_modes = 4
n_steps = 20
paths = 4

[[experiment]]
name = "duality"
label = "forced"
problem = "linear"
n_modes = 4
n_steps = 20
paths = 4
tolerance = 0.0
"#;
    let out = run_suite(&SuiteSpec::parse(text).unwrap(), false);
    assert!(!out.pass());
    assert_eq!(out.failed(), vec!["forced".to_string()]);
    assert!(out.outcomes[0].report.pass);
    assert_eq!(out.outcomes[1].report.failures(), vec!["max_path_residual".to_string()]);
}

#[test]
fn parse_errors_name_line_and_key() {
    let text = "[[experiment]]\nname = \"duality\"\nproblem = \"linear\"\npaths = 4\nwidth = 3\n";
    let Err(Error::Config(msg)) = SuiteSpec::parse(text) else {
        panic!("expected config error");
    };
    assert!(msg.contains("line 5") && msg.contains("width"), "{msg}");

    let text = "[[experiment]]\nname = \"duality\"\nproblem = \"linear\"\n\n[[experiment]]\nname = \"eps-scaling\"\nproblem = \"cubic\"\npaths = 0\n";
    let Err(Error::Config(msg)) = SuiteSpec::parse(text) else {
        panic!("expected config error");
    };
    assert!(msg.contains("line 8") && msg.contains("experiment[1].paths"), "{msg}");
}

#[test]
fn failed_problem_becomes_failing_report() {
    let exp = ExperimentSpec::new(ExperimentKind::Duality, "missing.toml");
    let out = run_experiment(&exp, Path::new("/nonexistent"));
    assert!(!out.report.pass);
    assert!(out.report.error.is_some());
}

#[test]
fn every_report_carries_an_anchor() {
    let mut exp = ExperimentSpec::new(ExperimentKind::AssumptionCheck, "linear");
    exp.paths = Some(200);
    let out = run_experiment(&exp, Path::new("."));
    assert!(out.report.pass, "{:?}", out.report);
    assert!(!out.report.anchor.is_empty());
    assert!(out.artifacts.iter().any(|a| a.name == "config.toml"));
}

#[test]
fn reports_are_deterministic() {
    let mut exp = ExperimentSpec::new(ExperimentKind::EpsScaling, "cubic");
    exp.paths = Some(40);
    exp.n_modes = Some(4);
    exp.n_steps = Some(50);
    let a = run_experiment(&exp, Path::new("."));
    let b = run_experiment(&exp, Path::new("."));
    assert_eq!(a.report.measured, b.report.measured);
    assert_eq!(a.artifacts, b.artifacts);
}

#[test]
fn shipped_suite_passes() {
    let suite = SuiteSpec::load(&configs().join("suite.toml")).unwrap();
    let out = run_suite(&suite, true);
    for o in &out.outcomes {
        assert!(o.report.pass, "{}", serde_json::to_string_pretty(&o.report).unwrap());
    }
    let kinds: std::collections::BTreeSet<&str> = out.outcomes.iter().map(|o| o.report.kind.name()).collect();
    assert_eq!(kinds.len(), 7);
}

#[test]
fn outcome_writes_report_and_artifacts() {
    let mut exp = ExperimentSpec::new(ExperimentKind::CostExpansion, "linear");
    exp.paths = Some(8);
    exp.n_steps = Some(40);
    let out = run_experiment(&exp, Path::new("."));
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    for f in ["report.json", "cost_expansion.csv", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["kind"], "cost-expansion");
}
