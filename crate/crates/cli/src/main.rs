use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use smp_spde::forward::{estimate_cost, simulate_batch};
use smp_spde::harness::{run_experiment, run_suite, ExperimentKind, ExperimentSpec, SuiteSpec};
use smp_spde::models::ProblemConfig;
use smp_spde::optimizer::{fd_gradient_check, projected_gradient_descent, PgdOptions};
use smp_spde::{AdjointMethod, ControlPath, PathBatch, ProblemSpec};

/// Stochastic maximum principle lab for controlled parabolic SPDEs.
#[derive(Parser, Debug)]
#[command(name = "smp-spde", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Problem file, built-in model name, or suite file for `verify`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,

    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Number of Monte Carlo paths; each command has its own default.
    #[arg(long, global = true, value_name = "N")]
    paths: Option<usize>,

    /// Run directory; defaults to a fresh timestamped directory under
    /// `$SMP_SPDE_OUT` (or `runs/`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(long, global = true, default_value = "discrete-adjoint", value_name = "discrete-adjoint|lsmc")]
    method: AdjointMethod,

    /// Worker threads for path batches.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Print the summary as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate forward paths at zero control and write them as CSV.
    Simulate,
    /// Monte Carlo estimate of the cost at zero control.
    Cost,
    /// Adjoint directional derivatives against central differences.
    GradCheck,
    /// Perturbation and remainder scaling in ε.
    EpsScaling,
    /// Projected gradient descent from zero control.
    Optimize,
    /// Run a verification suite.
    Verify,
    /// Numerical checks of the structural assumptions.
    CheckAssumptions,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Cost => "cost",
            Self::GradCheck => "grad-check",
            Self::EpsScaling => "eps-scaling",
            Self::Optimize => "optimize",
            Self::Verify => "verify",
            Self::CheckAssumptions => "check-assumptions",
        }
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

struct Outcome {
    success: bool,
    summary: Value,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            } else {
                print_human(&out.summary);
            }
            if out.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_human(summary: &Value) {
    if let Value::Object(map) = summary {
        for (k, v) in map {
            match v {
                Value::Array(_) | Value::Object(_) => println!("{k}: {v}"),
                Value::String(s) => println!("{k}: {s}"),
                other => println!("{k}: {other}"),
            }
        }
    }
}

fn run(cli: &Cli) -> AnyResult<Outcome> {
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| format!("{} needs --config", cli.command.name()))?;
    if cli.command == Command::Verify {
        return verify(cli, config);
    }
    let (_, spec) = ExperimentSpec::new(ExperimentKind::AssumptionCheck, config).resolve_problem(Path::new("."))?;
    let dir = run_dir(cli.out.as_deref())?;
    fs::write(dir.join("config.toml"), ProblemConfig::from_spec(&spec).to_toml_string())?;
    write_json(
        &dir.join("run.json"),
        &json!({
            "command": cli.command.name(),
            "config": config,
            "seed": cli.seed,
            "paths": cli.paths,
            "method": cli.method.name(),
            "threads": cli.threads,
        }),
    )?;
    eprintln!("run directory: {}", dir.display());
    let mut out = match cli.command {
        Command::Simulate => simulate(cli, &spec, &dir)?,
        Command::Cost => cost(cli, &spec, &dir)?,
        Command::GradCheck => grad_check(cli, &spec, &dir)?,
        Command::Optimize => optimize(cli, &spec, &dir)?,
        Command::EpsScaling => experiment(cli, ExperimentKind::EpsScaling, config, &dir)?,
        Command::CheckAssumptions => experiment(cli, ExperimentKind::AssumptionCheck, config, &dir)?,
        Command::Verify => unreachable!(),
    };
    if let Value::Object(map) = &mut out.summary {
        map.insert("run_dir".into(), json!(dir.display().to_string()));
    }
    Ok(out)
}

fn run_dir(out: Option<&Path>) -> std::io::Result<PathBuf> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os("SMP_SPDE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&root)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
    for i in 0.. {
        let name = if i == 0 { stamp.clone() } else { format!("{stamp}-{i}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> AnyResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn batch(cli: &Cli, spec: &ProblemSpec, default: usize) -> AnyResult<PathBatch> {
    Ok(PathBatch::for_spec(spec, cli.seed, cli.paths.unwrap_or(default))?)
}

fn simulate(cli: &Cli, spec: &ProblemSpec, dir: &Path) -> AnyResult<Outcome> {
    let control = ControlPath::zeros_for(spec);
    let batch = batch(cli, spec, 1)?;
    let paths = simulate_batch(spec, &spec.u0, &control, &batch)?;
    for (i, p) in paths.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("path_{i:04}.csv")))?);
        p.write_csv(&mut w, spec.dt())?;
        w.flush()?;
    }
    let blowups: Vec<usize> = paths
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_valid())
        .map(|(i, _)| i)
        .collect();
    let summary = json!({
        "command": "simulate",
        "n_paths": paths.len(),
        "blown_up_paths": blowups,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Outcome {
        success: blowups.is_empty(),
        summary,
    })
}

fn cost(cli: &Cli, spec: &ProblemSpec, dir: &Path) -> AnyResult<Outcome> {
    let control = ControlPath::zeros_for(spec);
    let est = estimate_cost(spec, &spec.u0, &control, &batch(cli, spec, 256)?)?;
    write_json(&dir.join("cost.json"), &est)?;
    Ok(Outcome {
        success: est.valid,
        summary: json!({ "command": "cost", "cost": est }),
    })
}

const GRAD_CHECK_TOL: f64 = 1e-6;

fn grad_check(cli: &Cli, spec: &ProblemSpec, dir: &Path) -> AnyResult<Outcome> {
    let control = ControlPath::zeros_for(spec);
    let d = spec.d_control();
    let mut directions = Vec::with_capacity(d + 1);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        directions.push(ControlPath::constant(spec.n_steps, &e)?);
    }
    directions.push(ControlPath::constant(spec.n_steps, &vec![1.0; d])?);
    let report = fd_gradient_check(spec, &control, &directions, &[1e-3, 1e-4, 1e-5], &batch(cli, spec, 64)?)?;
    write_json(&dir.join("grad_check.json"), &report)?;
    let best: Vec<f64> = report
        .directions
        .iter()
        .map(|d| d.rel_err.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let success = best.iter().all(|e| *e <= GRAD_CHECK_TOL);
    Ok(Outcome {
        success,
        summary: json!({
            "command": "grad-check",
            "n_paths": report.n_paths,
            "best_rel_err": best,
            "tolerance": GRAD_CHECK_TOL,
            "pass": success,
        }),
    })
}

fn optimize(cli: &Cli, spec: &ProblemSpec, dir: &Path) -> AnyResult<Outcome> {
    let defaults = PgdOptions::default();
    let options = PgdOptions {
        seed: cli.seed,
        n_paths: cli.paths.unwrap_or(defaults.n_paths),
        method: cli.method,
        ..defaults
    };
    let report = projected_gradient_descent(spec, &ControlPath::zeros_for(spec), &options)?;
    write_json(&dir.join("optimize.json"), &report)?;
    let mut w = BufWriter::new(File::create(dir.join("iterations.csv"))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("control.csv"))?);
    let header: Vec<String> = (0..spec.d_control()).map(|j| format!("phi_{j}")).collect();
    writeln!(w, "step,t,{}", header.join(","))?;
    for (k, phi) in report.final_control.values().iter().enumerate() {
        let vals: Vec<String> = phi.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{k},{:e},{}", k as f64 * spec.dt(), vals.join(","))?;
    }
    w.flush()?;
    Ok(Outcome {
        success: report.converged(),
        summary: json!({
            "command": "optimize",
            "status": report.status,
            "iterations": report.iterates.len() - 1,
            "initial_cost": report.iterates.first(),
            "final_cost": report.iterates.last(),
            "initial_residual": report.initial_residual,
            "final_residual": report.final_residual,
        }),
    })
}

fn experiment(cli: &Cli, kind: ExperimentKind, config: &str, dir: &Path) -> AnyResult<Outcome> {
    let mut exp = ExperimentSpec::new(kind, config);
    exp.seed = Some(cli.seed);
    exp.paths = cli.paths;
    exp.method = Some(cli.method);
    let outcome = run_experiment(&exp, Path::new("."));
    outcome.write_to(dir)?;
    Ok(Outcome {
        success: outcome.report.pass,
        summary: serde_json::to_value(&outcome.report)?,
    })
}

fn verify(cli: &Cli, config: &str) -> AnyResult<Outcome> {
    let path = Path::new(config);
    let text = fs::read_to_string(path).map_err(|e| format!("{config}: {e}"))?;
    let mut suite = SuiteSpec::load(path)?;
    let dir = run_dir(cli.out.as_deref())?;
    fs::write(dir.join("suite.toml"), text)?;
    eprintln!("run directory: {}", dir.display());
    for exp in &mut suite.experiment {
        if exp.seed.is_none() {
            exp.seed = Some(cli.seed);
        }
        if cli.paths.is_some() {
            exp.paths = cli.paths;
        }
    }
    let outcome = run_suite(&suite, cli.threads > 1);
    let mut used = std::collections::BTreeSet::new();
    let mut rows = Vec::new();
    for o in &outcome.outcomes {
        let mut label = o.report.experiment.clone();
        let mut i = 1;
        while !used.insert(label.clone()) {
            i += 1;
            label = format!("{}-{i}", o.report.experiment);
        }
        o.write_to(&dir.join(&label))?;
        rows.push(json!({
            "experiment": label,
            "kind": o.report.kind,
            "pass": o.report.pass,
            "error": o.report.error,
        }));
    }
    let summary = json!({
        "command": "verify",
        "pass": outcome.pass(),
        "failed": outcome.failed(),
        "experiments": rows,
        "run_dir": dir.display().to_string(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Outcome {
        success: outcome.pass(),
        summary,
    })
}
