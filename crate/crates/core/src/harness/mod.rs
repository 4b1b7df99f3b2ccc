//! Named verification experiments, declared as data in a TOML suite.
//!
//! ```toml
//! [[experiment]]
//! name = "duality"
//! problem = "burgers"          # built-in model, or a problem file
//! method = "discrete-adjoint"
//! paths = 100
//! tolerance = 1e-10
//! ```

pub mod oracle;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    duality_residual, solve_discrete_adjoint_batch, solve_lsmc_adjoint, stability_constant, AdjointMethod,
    RegressionBasis,
};
use crate::error::{Error, Result};
use crate::forward::{simulate_batch, ControlPath};
use crate::models::{check_assumptions, BuiltinModel, ProblemSpec};
use crate::optimizer::{projected_gradient_descent, PgdOptions};
use crate::sensitivity::{cost_expansion, eps_scaling_report, simulate_linearized};
use crate::wiener::PathBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    EpsScaling,
    DeltaEps,
    Duality,
    CostExpansion,
    SmpAtOptimum,
    AdjointStability,
    AssumptionCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::EpsScaling => "eps-scaling",
            Self::DeltaEps => "delta-eps",
            Self::Duality => "duality",
            Self::CostExpansion => "cost-expansion",
            Self::SmpAtOptimum => "smp-at-optimum",
            Self::AdjointStability => "adjoint-stability",
            Self::AssumptionCheck => "assumption-check",
        }
    }

    /// The statement the experiment tests.
    pub fn anchor(self) -> &'static str {
        match self {
            Self::EpsScaling => "first-order perturbation bound: sup_t E|u_eps - u*|^2 = O(eps^2) under local monotonicity",
            Self::DeltaEps => "first variation: (u_eps - u*)/eps - P -> 0 in mean square, P the linearized solution",
            Self::Duality => "duality: E(v(T),P(T)) = -E int (L_u,P) dt + E int (v, B_Phi Phi~) dt",
            Self::CostExpansion => {
                "cost expansion: J(Phi_eps) - J(Phi*) = eps E(K'(u*(T)),P(T)) + eps E int (L_u,P) + E int L(u*,Phi_eps) - L(u*,Phi*) + o(eps)"
            }
            Self::SmpAtOptimum => "maximum principle: (grad_Phi H(u*,Phi*,v*,Z*), Phi* - Phi) <= 0 for all admissible Phi",
            Self::AdjointStability => "adjoint a priori bound: sup E|v|^2 + E int |v|_V^2 + E int |Z|_2^2 <= c",
            Self::AssumptionCheck => "standing hypotheses: local monotonicity, coercivity, cost growth, and the integrability condition",
        }
    }

    fn default_paths(self) -> usize {
        match self {
            Self::EpsScaling | Self::DeltaEps | Self::CostExpansion => 200,
            Self::Duality => 100,
            Self::SmpAtOptimum => 256,
            Self::AdjointStability => 2000,
            Self::AssumptionCheck => 10_000,
        }
    }

    fn default_tolerance(self, method: AdjointMethod) -> f64 {
        match self {
            // slope within 2 ± tolerance
            Self::EpsScaling | Self::CostExpansion => 0.1,
            // sup E‖Δ_ε‖² at the smallest ε over its value at the largest
            Self::DeltaEps => 1e-3,
            Self::Duality => match method {
                AdjointMethod::DiscreteAdjoint => 1e-10,
                AdjointMethod::Lsmc => 5e-2,
            },
            // final over initial maximum-principle residual
            Self::SmpAtOptimum => 1e-3,
            // relative change of the stability constant from a tenth of the batch
            Self::AdjointStability => 0.1,
            Self::AssumptionCheck => 0.0,
        }
    }

    fn default_eps(self) -> Vec<f64> {
        match self {
            Self::DeltaEps => vec![0.2, 0.1, 0.05, 0.025, 0.0125],
            Self::CostExpansion => vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
            _ => vec![0.2, 0.1, 0.05, 0.025],
        }
    }
}

/// One `[[experiment]]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentKind,
    /// Output directory and report name; defaults to `<name>-<problem>`.
    pub label: Option<String>,
    /// Built-in model name, or a problem file relative to the suite file.
    pub problem: String,
    /// Built-in models only.
    pub n_modes: Option<usize>,
    pub n_steps: Option<usize>,
    pub u0: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub method: Option<AdjointMethod>,
    pub tolerance: Option<f64>,
    pub eps: Option<Vec<f64>>,
    /// Constant reference control `Φ*`; zero by default.
    pub phi_star: Option<Vec<f64>>,
    /// Constant perturbation direction `Φ̃`; all ones by default.
    pub direction: Option<Vec<f64>>,
    pub max_iters: Option<usize>,
    /// Largest trial step of the descent.
    pub step0: Option<f64>,
    /// Sampling radius of the assumption check.
    pub radius: Option<f64>,
    /// Relative distance to the oracle control at the optimum.
    pub oracle_tolerance: Option<f64>,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentKind, problem: &str) -> Self {
        Self {
            name,
            label: None,
            problem: problem.to_string(),
            n_modes: None,
            n_steps: None,
            u0: None,
            seed: None,
            paths: None,
            method: None,
            tolerance: None,
            eps: None,
            phi_star: None,
            direction: None,
            max_iters: None,
            step0: None,
            radius: None,
            oracle_tolerance: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let stem = Path::new(&self.problem)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.problem.clone());
            format!("{}-{}", self.name.name(), stem)
        })
    }

    pub fn method(&self) -> AdjointMethod {
        self.method.unwrap_or(AdjointMethod::DiscreteAdjoint)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn paths(&self) -> usize {
        self.paths.unwrap_or(self.name.default_paths())
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(self.name.default_tolerance(self.method()))
    }

    pub fn eps(&self) -> Vec<f64> {
        self.eps.clone().unwrap_or_else(|| self.name.default_eps())
    }

    /// Problem text (TOML) and the built spec.
    pub fn resolve_problem(&self, base_dir: &Path) -> Result<(String, ProblemSpec)> {
        let mut config = match self.problem.parse::<BuiltinModel>() {
            Ok(model) => model.config(self.n_modes.unwrap_or(8), self.n_steps.unwrap_or(200)),
            Err(_) => {
                let path = base_dir.join(&self.problem);
                let text = std::fs::read_to_string(&path)?;
                let spec = ProblemSpec::from_toml_str(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                    other => other,
                })?;
                crate::models::ProblemConfig::from_spec(&spec)
            }
        };
        if let Some(u0) = &self.u0 {
            config.space.u0 = Some(u0.clone());
        }
        let text = config.to_toml_string();
        let spec = config.build(&text)?;
        Ok((text, spec))
    }

    fn constant_control(&self, spec: &ProblemSpec, v: &Option<Vec<f64>>, default: f64) -> Result<ControlPath> {
        let phi = v.clone().unwrap_or_else(|| vec![default; spec.d_control()]);
        ControlPath::constant(spec.n_steps, &phi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "comparator", rename_all = "kebab-case")]
pub enum Bound {
    /// `value < tolerance`
    Below { tolerance: f64 },
    /// `value ≥ tolerance`
    AtLeast { tolerance: f64 },
    /// `lo ≤ value ≤ hi`
    Within { lo: f64, hi: f64 },
    /// Reported only.
    Info,
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Self::Below { tolerance } => v < tolerance,
            Self::AtLeast { tolerance } => v >= tolerance,
            Self::Within { lo, hi } => lo <= v && v <= hi,
            Self::Info => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    #[serde(flatten)]
    pub bound: Bound,
    pub pass: bool,
}

impl Measurement {
    pub fn new(name: &str, value: f64, bound: Bound) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound,
            pass: bound.holds(value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub anchor: String,
    pub problem: String,
    pub seed: u64,
    pub n_paths: usize,
    pub measured: Vec<Measurement>,
    pub pass: bool,
    /// Set when the experiment could not complete.
    pub error: Option<String>,
    pub runtime_secs: f64,
}

impl VerificationReport {
    /// Names of the failed measurements.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .measured
            .iter()
            .filter(|m| !m.pass)
            .map(|m| m.name.clone())
            .collect();
        if let Some(e) = &self.error {
            out.push(e.clone());
        }
        out
    }
}

/// A named file produced next to the report.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: VerificationReport,
    pub artifacts: Vec<Artifact>,
}

impl ExperimentOutcome {
    /// Writes `report.json` and every artifact into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        for a in &self.artifacts {
            std::fs::write(dir.join(&a.name), &a.contents)?;
        }
        Ok(())
    }
}

fn csv_of(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is ascii"))
}

struct Run {
    measured: Vec<Measurement>,
    artifacts: Vec<Artifact>,
}

impl Run {
    fn new() -> Self {
        Self {
            measured: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn measure(&mut self, name: &str, value: f64, bound: Bound) {
        self.measured.push(Measurement::new(name, value, bound));
    }

    fn artifact(&mut self, name: &str, contents: String) {
        self.artifacts.push(Artifact {
            name: name.to_string(),
            contents,
        });
    }
}

fn slope_bound(tol: f64) -> Bound {
    Bound::Within {
        lo: 2.0 - tol,
        hi: 2.0 + tol,
    }
}

fn run_kind(exp: &ExperimentSpec, spec: &ProblemSpec, run: &mut Run) -> Result<()> {
    let tol = exp.tolerance();
    let seed = exp.seed();
    let paths = exp.paths();
    let linear = oracle::is_lq(spec);
    match exp.name {
        ExperimentKind::EpsScaling | ExperimentKind::DeltaEps => {
            let batch = PathBatch::for_spec(spec, seed, paths)?;
            let star = exp.constant_control(spec, &exp.phi_star, 0.0)?;
            let dir = exp.constant_control(spec, &exp.direction, 1.0)?;
            let r = eps_scaling_report(spec, &spec.u0, &star, &dir, &exp.eps(), &batch)?;
            run.artifact("eps_scaling.csv", csv_of(|w| r.write_csv(w))?);
            run.artifact("eps_scaling.json", serde_json::to_string_pretty(&r)?);
            if exp.name == ExperimentKind::EpsScaling {
                run.measure("slope_sq_err", r.slope_sq_err, slope_bound(tol));
                run.measure("slope_sq_err_weighted", r.slope_sq_err_weighted, Bound::Info);
                for (i, m) in r.e1_fourth_moment.iter().enumerate() {
                    run.measure(&format!("e1_fourth_moment_eps{}", r.eps_values[i]), m[2], Bound::Info);
                }
            } else if linear {
                let worst = r.sup_delta_sq.iter().copied().fold(0.0, f64::max);
                run.measure("max_sup_delta_sq", worst, Bound::Below { tolerance: 1e-12 });
            } else {
                let decreasing = r.sup_delta_sq.windows(2).all(|w| w[1] < w[0]);
                run.measure(
                    "strictly_decreasing",
                    f64::from(u8::from(decreasing)),
                    Bound::AtLeast { tolerance: 1.0 },
                );
                let ratio = r.sup_delta_sq.last().unwrap() / r.sup_delta_sq[0];
                run.measure("ratio_smallest_to_largest_eps", ratio, Bound::Below { tolerance: tol });
                run.measure("slope_delta_sq", r.slope_delta_sq, Bound::Info);
            }
        }
        ExperimentKind::Duality => {
            let batch = PathBatch::for_spec(spec, seed, paths)?;
            let star = exp.constant_control(spec, &exp.phi_star, 0.0)?;
            let dir = exp.constant_control(spec, &exp.direction, 1.0)?;
            let fw = simulate_batch(spec, &spec.u0, &star, &batch)?;
            let adj = match exp.method() {
                AdjointMethod::DiscreteAdjoint => solve_discrete_adjoint_batch(spec, &fw, &star, &batch)?,
                AdjointMethod::Lsmc => {
                    let basis = RegressionBasis::new(spec.n_modes().min(4));
                    solve_lsmc_adjoint(spec, &fw, &star, &batch, &basis)?
                }
            };
            let sens = fw
                .par_iter()
                .zip(batch.paths().par_iter())
                .map(|(f, w)| simulate_linearized(spec, f, &dir, w))
                .collect::<Result<Vec<_>>>()?;
            let d = duality_residual(spec, &sens, &adj, &fw, &dir)?;
            run.artifact("duality.json", serde_json::to_string_pretty(&d)?);
            match exp.method() {
                AdjointMethod::DiscreteAdjoint => {
                    run.measure("max_path_residual", d.max_path_residual, Bound::Below { tolerance: tol });
                    run.measure("batch_residual", d.residual, Bound::Info);
                }
                AdjointMethod::Lsmc => {
                    run.measure("batch_residual", d.residual, Bound::Below { tolerance: tol });
                }
            }
        }
        ExperimentKind::CostExpansion => {
            let batch = PathBatch::for_spec(spec, seed, paths)?;
            let star = exp.constant_control(spec, &exp.phi_star, 0.0)?;
            let dir = exp.constant_control(spec, &exp.direction, 1.0)?;
            let r = cost_expansion(spec, &star, &dir, &exp.eps(), &batch)?;
            run.artifact("cost_expansion.csv", csv_of(|w| r.write_csv(w))?);
            run.measure("remainder_slope", r.remainder_slope, slope_bound(tol));
        }
        ExperimentKind::SmpAtOptimum => {
            let phi0 = exp.constant_control(spec, &exp.phi_star, 0.0)?.project(spec);
            let opts = PgdOptions {
                max_iters: exp.max_iters.unwrap_or(500),
                step0: exp.step0.unwrap_or(1.0),
                tol_rel: tol,
                seed,
                n_paths: paths,
                method: exp.method(),
                ..PgdOptions::default()
            };
            let r = projected_gradient_descent(spec, &phi0, &opts)?;
            run.artifact("optimize.csv", csv_of(|w| r.write_csv(w))?);
            run.artifact("optimize.json", serde_json::to_string_pretty(&r)?);
            let ratio = if r.initial_residual > 0.0 {
                r.final_residual / r.initial_residual
            } else {
                0.0
            };
            run.measure(
                "residual_ratio",
                ratio,
                Bound::Within {
                    lo: f64::NEG_INFINITY,
                    hi: tol,
                },
            );
            if linear && exp.method() == AdjointMethod::DiscreteAdjoint && opts.antithetic {
                let kkt = oracle::kkt_control(spec)?;
                let dt = spec.dt();
                let dist = r.final_control.add_scaled(-1.0, &kkt.control)?.norm_l2(dt) / kkt.control.norm_l2(dt).max(1e-300);
                run.measure(
                    "oracle_distance",
                    dist,
                    Bound::Below {
                        tolerance: exp.oracle_tolerance.unwrap_or(0.02),
                    },
                );
            }
        }
        ExperimentKind::AdjointStability => {
            let batch = PathBatch::for_spec(spec, seed, paths)?;
            let star = exp.constant_control(spec, &exp.phi_star, 0.0)?;
            let fw = simulate_batch(spec, &spec.u0, &star, &batch)?;
            let adj = solve_discrete_adjoint_batch(spec, &fw, &star, &batch)?;
            let small = stability_constant(spec, &adj[..(paths / 10).max(1)]);
            let full = stability_constant(spec, &adj);
            run.measure("constant_small_batch", small, Bound::Info);
            run.measure("constant_full_batch", full, Bound::Info);
            run.measure(
                "relative_change",
                (full - small).abs() / full.abs().max(1e-300),
                Bound::Below { tolerance: tol },
            );
        }
        ExperimentKind::AssumptionCheck => {
            let r = check_assumptions(spec, paths, exp.radius.unwrap_or(2.0), seed)?;
            run.artifact("assumptions.json", serde_json::to_string_pretty(&r)?);
            run.measure(
                "a2_violation_count",
                r.a2_violation_count as f64,
                Bound::Within { lo: 0.0, hi: 0.0 },
            );
            run.measure("a2_worst_margin", r.a2_worst_margin, Bound::AtLeast { tolerance: 0.0 });
            run.measure("a3_coercivity_margin", r.a3_coercivity_margin, Bound::AtLeast { tolerance: 0.0 });
            run.measure("rho1_max_ratio", r.rho1_max_ratio, Bound::Within { lo: 0.0, hi: 1.0 });
            run.measure("lemma2_value", r.lemma2_value, Bound::Info);
            run.measure("h1_running_ratio", r.h1_running_ratio, Bound::Info);
            run.measure("h1_terminal_ratio", r.h1_terminal_ratio, Bound::Info);
        }
    }
    Ok(())
}

/// Runs one experiment. Failures to complete become a failing report that
/// names the error instead of an `Err`.
pub fn run_experiment(exp: &ExperimentSpec, base_dir: &Path) -> ExperimentOutcome {
    let start = Instant::now();
    let mut run = Run::new();
    let mut problem_text = None;
    let result = exp.resolve_problem(base_dir).and_then(|(text, spec)| {
        problem_text = Some(text);
        run_kind(exp, &spec, &mut run)
    });
    if let Some(text) = problem_text {
        run.artifact("config.toml", text);
    }
    let error = result.err().map(|e| e.to_string());
    let pass = error.is_none() && run.measured.iter().all(|m| m.pass);
    ExperimentOutcome {
        report: VerificationReport {
            experiment: exp.label(),
            kind: exp.name,
            anchor: exp.name.anchor().to_string(),
            problem: exp.problem.clone(),
            seed: exp.seed(),
            n_paths: exp.paths(),
            measured: run.measured,
            pass,
            error,
            runtime_secs: start.elapsed().as_secs_f64(),
        },
        artifacts: run.artifacts,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    #[serde(default)]
    pub experiment: Vec<ExperimentSpec>,
    /// Directory that relative problem paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SuiteSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let suite: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        for (i, exp) in suite.experiment.iter().enumerate() {
            let bad = |key: &str, msg: &str| {
                let line = experiment_line(text, i, key).map(|l| format!("line {l}: ")).unwrap_or_default();
                Error::Config(format!("{line}experiment[{i}].{key}: {msg}"))
            };
            if exp.paths == Some(0) {
                return Err(bad("paths", "must be positive"));
            }
            if exp.tolerance.is_some_and(|t| t.is_nan()) {
                return Err(bad("tolerance", "must be a number"));
            }
            if let Some(eps) = &exp.eps {
                if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
                    return Err(bad("eps", "values must lie in (0, 1]"));
                }
            }
        }
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut suite = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        suite.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(suite)
    }
}

/// 1-based line of `key` inside the `index`-th `[[experiment]]` table.
fn experiment_line(text: &str, index: usize, key: &str) -> Option<usize> {
    let mut seen = 0;
    let mut inside = false;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            inside = t == "[[experiment]]" && {
                seen += 1;
                seen == index + 1
            };
            continue;
        }
        if inside && t.split('=').next().is_some_and(|k| k.trim() == key) {
            return Some(i + 1);
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub outcomes: Vec<ExperimentOutcome>,
}

impl SuiteOutcome {
    pub fn pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.report.pass)
    }

    pub fn reports(&self) -> Vec<&VerificationReport> {
        self.outcomes.iter().map(|o| &o.report).collect()
    }

    /// Labels of failed experiments.
    pub fn failed(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .filter(|o| !o.report.pass)
            .map(|o| o.report.experiment.clone())
            .collect()
    }
}

/// Runs the experiments in declared order; `concurrent` runs them at the
/// same time, with reports still in declared order.
pub fn run_suite(suite: &SuiteSpec, concurrent: bool) -> SuiteOutcome {
    let outcomes = if concurrent {
        suite
            .experiment
            .par_iter()
            .map(|e| run_experiment(e, &suite.base_dir))
            .collect()
    } else {
        suite
            .experiment
            .iter()
            .map(|e| run_experiment(e, &suite.base_dir))
            .collect()
    };
    SuiteOutcome { outcomes }
}

