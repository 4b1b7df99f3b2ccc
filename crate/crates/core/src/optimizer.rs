//! Hamiltonian, adjoint-based control gradients, projected gradient descent
//! and the maximum-principle residual.

use std::io::Write;

use serde::Serialize;

use crate::adjoint::{solve_discrete_adjoint_batch, solve_lsmc_adjoint, AdjointMethod, AdjointPath, RegressionBasis};
use crate::error::{check_len, Error, Result};
use crate::forward::{simulate_batch, summarize_costs, ControlPath, CostEstimate, ForwardPath};
use crate::models::ProblemSpec;
use crate::spectral::{hs_inner, HsOperator, SpectralField};
use crate::stats::{loglog_slope, mean_and_std_err, quantile};
use crate::wiener::PathBatch;

/// `ℋ(u,Φ,v,Z) = ℒ(u,Φ) + ⟨B(u,Φ), v⟩ + ⟨Ξ(u), Z⟩₂`.
pub fn hamiltonian_eval(
    spec: &ProblemSpec,
    u: &SpectralField,
    phi: &[f64],
    v: &SpectralField,
    z: &HsOperator,
) -> Result<f64> {
    check_len(spec.n_modes(), v.len())?;
    let running = spec.cost_running(u, phi)?.value;
    let drift = spec.drift_eval(u, phi)?;
    let noise = spec.noise_eval(u)?;
    Ok(running + drift.dot(v) + hs_inner(&noise, z)?)
}

/// `∇_Φℋ = ℒ_Φ(u,Φ) + Gᵀv`.
pub fn hamiltonian_grad_control(
    spec: &ProblemSpec,
    u: &SpectralField,
    phi: &[f64],
    v: &SpectralField,
) -> Result<Vec<f64>> {
    check_len(spec.n_modes(), v.len())?;
    let mut g = spec.cost_running(u, phi)?.grad_phi;
    for (gi, bi) in g.iter_mut().zip(spec.gain_transpose(v)) {
        *gi += bi;
    }
    Ok(g)
}

/// Settings for the adjoint used inside gradient estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientSettings {
    pub method: AdjointMethod,
    /// Only read by the regression method.
    pub basis: RegressionBasis,
}

impl GradientSettings {
    pub fn new(spec: &ProblemSpec, method: AdjointMethod) -> Self {
        Self {
            method,
            basis: RegressionBasis::new(spec.n_modes().min(4)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientPath {
    /// Batch mean of `∇_Φℋ` per step.
    pub values: Vec<Vec<f64>>,
    /// Euclidean norm of the per-component standard errors, per step.
    pub std_err: Vec<f64>,
    pub method: AdjointMethod,
    pub n_paths: usize,
    /// Cost of the control at which the gradient was taken, same batch.
    pub cost: CostEstimate,
}

impl GradientPath {
    /// `Σ_k Δt⟨g_k, Φ̃_k⟩`
    pub fn directional(&self, direction: &ControlPath, dt: f64) -> Result<f64> {
        check_len(self.values.len(), direction.n_steps())?;
        Ok(dt
            * self
                .values
                .iter()
                .zip(direction.values())
                .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>())
    }

    /// `(Σ_k Δt‖g_k‖²)^{1/2}`
    pub fn norm_l2(&self, dt: f64) -> f64 {
        (dt * self.values.iter().flatten().map(|x| x * x).sum::<f64>()).sqrt()
    }

    /// `(Σ_k Δt·se_k²)^{1/2}`, the matching scale of Monte Carlo noise.
    pub fn std_err_l2(&self, dt: f64) -> f64 {
        (dt * self.std_err.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }

    pub fn as_control(&self) -> ControlPath {
        ControlPath::from_vec_unchecked(self.values.clone())
    }
}

/// Gradient together with the pathwise pieces it was averaged from.
struct GradientSample {
    mean: GradientPath,
    pathwise: Vec<Vec<Vec<f64>>>,
}

fn first_blowup(paths: &[ForwardPath]) -> Option<usize> {
    paths.iter().filter_map(|p| p.blowup_step).min()
}

fn adjoints(
    spec: &ProblemSpec,
    forwards: &[ForwardPath],
    control: &ControlPath,
    batch: &PathBatch,
    settings: &GradientSettings,
) -> Result<Vec<AdjointPath>> {
    match settings.method {
        AdjointMethod::DiscreteAdjoint => solve_discrete_adjoint_batch(spec, forwards, control, batch),
        AdjointMethod::Lsmc => solve_lsmc_adjoint(spec, forwards, control, batch, &settings.basis),
    }
}

fn sample_gradient(
    spec: &ProblemSpec,
    control: &ControlPath,
    batch: &PathBatch,
    settings: &GradientSettings,
) -> Result<GradientSample> {
    control.check_for(spec)?;
    if batch.is_empty() {
        return Err(Error::invalid("gradient needs a non-empty batch"));
    }
    let forwards = simulate_batch(spec, &spec.u0, control, batch)?;
    if let Some(step) = first_blowup(&forwards) {
        return Err(Error::BlowUp { step });
    }
    let cost = summarize_costs(spec, &forwards, control)?;
    let adj = adjoints(spec, &forwards, control, batch, settings)?;
    let r = spec.cost.r;
    let pathwise: Vec<Vec<Vec<f64>>> = adj
        .iter()
        .map(|a| {
            (0..spec.n_steps)
                .map(|k| {
                    let mut g = spec.gain_transpose(&a.propagated[k]);
                    for (gi, p) in g.iter_mut().zip(control.step(k)) {
                        *gi += r * p;
                    }
                    g
                })
                .collect()
        })
        .collect();
    let d = spec.d_control();
    let mut values = Vec::with_capacity(spec.n_steps);
    let mut std_err = Vec::with_capacity(spec.n_steps);
    let mut column = vec![0.0; pathwise.len()];
    for k in 0..spec.n_steps {
        let mut g = vec![0.0; d];
        let mut se_sq = 0.0;
        for (i, gi) in g.iter_mut().enumerate() {
            for (c, p) in column.iter_mut().zip(&pathwise) {
                *c = p[k][i];
            }
            let (m, se) = mean_and_std_err(&column);
            *gi = m;
            se_sq += se * se;
        }
        values.push(g);
        std_err.push(se_sq.sqrt());
    }
    Ok(GradientSample {
        mean: GradientPath {
            values,
            std_err,
            method: settings.method,
            n_paths: batch.len(),
            cost,
        },
        pathwise,
    })
}

/// Batch-averaged `∇_Φℋ(u_k, φ_k, v_k, Z_k)` at `control`, started from
/// `spec.u0`. The regression method uses quadratic features in the first
/// `min(n, 4)` modes; see [`estimate_gradient_with`] to choose them.
pub fn estimate_gradient(
    spec: &ProblemSpec,
    control: &ControlPath,
    batch: &PathBatch,
    method: AdjointMethod,
) -> Result<GradientPath> {
    estimate_gradient_with(spec, control, batch, &GradientSettings::new(spec, method))
}

pub fn estimate_gradient_with(
    spec: &ProblemSpec,
    control: &ControlPath,
    batch: &PathBatch,
    settings: &GradientSettings,
) -> Result<GradientPath> {
    Ok(sample_gradient(spec, control, batch, settings)?.mean)
}

/// Batch-mean cost of `control`; the perturbed controls of a finite
/// difference need not be admissible.
fn batch_cost(spec: &ProblemSpec, control: &ControlPath, batch: &PathBatch) -> Result<f64> {
    let paths = simulate_batch(spec, &spec.u0, control, batch)?;
    if let Some(step) = first_blowup(&paths) {
        return Err(Error::BlowUp { step });
    }
    Ok(summarize_costs(spec, &paths, control)?.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdDirection {
    /// `Σ_k Δt⟨g_k, Φ̃_k⟩` from the discrete adjoint.
    pub adjoint_derivative: f64,
    pub fd_derivative: Vec<f64>,
    pub rel_err: Vec<f64>,
    /// `|𝒥(Φ+εΦ̃) − 𝒥(Φ) − ε·adjoint_derivative|`
    pub remainder: Vec<f64>,
    pub remainder_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdCheckReport {
    pub eps: Vec<f64>,
    pub base_cost: f64,
    pub directions: Vec<FdDirection>,
    pub max_rel_err: f64,
    pub n_paths: usize,
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Discrete-adjoint directional derivatives against central differences of
/// the fixed-batch cost.
pub fn fd_gradient_check(
    spec: &ProblemSpec,
    control: &ControlPath,
    directions: &[ControlPath],
    eps_list: &[f64],
    batch: &PathBatch,
) -> Result<FdCheckReport> {
    if eps_list.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::invalid("finite-difference steps must be positive"));
    }
    let grad = estimate_gradient(spec, control, batch, AdjointMethod::DiscreteAdjoint)?;
    let base = grad.cost.mean;
    let dt = spec.dt();
    let mut out = Vec::with_capacity(directions.len());
    for dir in directions {
        dir.check_for(spec)?;
        let adjoint_derivative = grad.directional(dir, dt)?;
        let mut fd_derivative = Vec::new();
        let mut rel_err = Vec::new();
        let mut remainder = Vec::new();
        for &eps in eps_list {
            let plus = batch_cost(spec, &control.add_scaled(eps, dir)?, batch)?;
            let minus = batch_cost(spec, &control.add_scaled(-eps, dir)?, batch)?;
            let fd = (plus - minus) / (2.0 * eps);
            fd_derivative.push(fd);
            rel_err.push(rel_diff(fd, adjoint_derivative));
            remainder.push((plus - base - eps * adjoint_derivative).abs());
        }
        out.push(FdDirection {
            adjoint_derivative,
            remainder_slope: loglog_slope(eps_list, &remainder),
            fd_derivative,
            rel_err,
            remainder,
        });
    }
    let max_rel_err = out
        .iter()
        .flat_map(|d| d.rel_err.iter().copied())
        .fold(0.0, f64::max);
    Ok(FdCheckReport {
        eps: eps_list.to_vec(),
        base_cost: base,
        directions: out,
        max_rel_err,
        n_paths: batch.len(),
    })
}

/// `max_{Φ′ ∈ vertices} ⟨g, φ − Φ′⟩`, coordinatewise over the box.
fn vertex_residual(spec: &ProblemSpec, g: &[f64], phi: &[f64]) -> f64 {
    let c = &spec.controls;
    g.iter()
        .zip(phi)
        .zip(c.lower.iter().zip(&c.upper))
        .map(|((gi, p), (lo, hi))| {
            let a = gi * (p - lo);
            let b = gi * (p - hi);
            // 0·∞ on an unbounded side with zero gradient contributes nothing
            let a = if a.is_nan() { 0.0 } else { a };
            let b = if b.is_nan() { 0.0 } else { b };
            a.max(b)
        })
        .sum()
}

/// Per-step box-vertex residual of a gradient at `control`.
pub fn smp_residual_of(spec: &ProblemSpec, control: &ControlPath, gradient: &[Vec<f64>]) -> Result<Vec<f64>> {
    control.check_for(spec)?;
    check_len(spec.n_steps, gradient.len())?;
    gradient
        .iter()
        .enumerate()
        .map(|(k, g)| {
            check_len(spec.d_control(), g.len())?;
            Ok(vertex_residual(spec, g, control.step(k)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmpResidual {
    pub max_over_t: f64,
    pub per_step: Vec<f64>,
    /// Median, 90% and maximum over paths of the pathwise `max_k r_k`.
    pub path_quantiles: [f64; 3],
    pub method: AdjointMethod,
    pub n_paths: usize,
}

pub fn smp_residual(
    spec: &ProblemSpec,
    control: &ControlPath,
    batch: &PathBatch,
    method: AdjointMethod,
) -> Result<SmpResidual> {
    smp_residual_with(spec, control, batch, &GradientSettings::new(spec, method))
}

pub fn smp_residual_with(
    spec: &ProblemSpec,
    control: &ControlPath,
    batch: &PathBatch,
    settings: &GradientSettings,
) -> Result<SmpResidual> {
    if !control.is_admissible(spec) {
        return Err(Error::Inadmissible("control leaves the box".into()));
    }
    let sample = sample_gradient(spec, control, batch, settings)?;
    let per_step = smp_residual_of(spec, control, &sample.mean.values)?;
    let path_max: Vec<f64> = sample
        .pathwise
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(k, gk)| vertex_residual(spec, gk, control.step(k)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(SmpResidual {
        max_over_t: per_step.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_step,
        path_quantiles: [quantile(&path_max, 0.5), quantile(&path_max, 0.9), quantile(&path_max, 1.0)],
        method: settings.method,
        n_paths: batch.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PgdOptions {
    pub max_iters: usize,
    /// Largest trial step; each iteration starts from twice the last accepted
    /// step, capped here.
    pub step0: f64,
    pub c1: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Stop once the residual is at most `max(tol_abs, tol_rel · initial)`.
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub seed: u64,
    pub n_paths: usize,
    /// Draw the batch as antithetic pairs.
    pub antithetic: bool,
    pub method: AdjointMethod,
    pub n_feat: usize,
}

impl Default for PgdOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step0: 1.0,
            c1: 1e-4,
            backtrack: 0.5,
            min_step: 1e-10,
            tol_abs: 1e-12,
            tol_rel: 1e-3,
            seed: 0,
            n_paths: 256,
            antithetic: true,
            method: AdjointMethod::DiscreteAdjoint,
            n_feat: 4,
        }
    }
}

impl PgdOptions {
    pub fn batch(&self, spec: &ProblemSpec) -> Result<PathBatch> {
        if self.antithetic {
            if !self.n_paths.is_multiple_of(2) {
                return Err(Error::invalid("antithetic batches need an even path count"));
            }
            PathBatch::antithetic_pairs(self.seed, self.n_paths / 2, spec.n_steps, spec.m_noise(), spec.dt())
        } else {
            PathBatch::for_spec(spec, self.seed, self.n_paths)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PgdStatus {
    Converged,
    /// No step above `min_step` decreased the cost.
    Stalled,
    MaxIters,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LineSearchTrial {
    pub iter: usize,
    pub step: f64,
    pub trial_cost: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizeReport {
    /// Cost at the start and after every accepted step.
    pub iterates: Vec<f64>,
    pub std_errs: Vec<f64>,
    pub smp_residual_history: Vec<f64>,
    /// Accepted step per row of `iterates` (0 for the start).
    pub steps: Vec<f64>,
    pub line_search_log: Vec<LineSearchTrial>,
    pub final_control: ControlPath,
    pub status: PgdStatus,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub options: PgdOptions,
}

impl OptimizeReport {
    pub fn converged(&self) -> bool {
        self.status == PgdStatus::Converged
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,cost,std_err,step,smp_residual")?;
        for i in 0..self.iterates.len() {
            writeln!(
                w,
                "{i},{},{},{},{}",
                self.iterates[i], self.std_errs[i], self.steps[i], self.smp_residual_history[i]
            )?;
        }
        Ok(())
    }
}

/// Projected gradient descent with Armijo backtracking along the projection
/// arc, on a fixed batch so that cost comparisons use common random numbers.
pub fn projected_gradient_descent(
    spec: &ProblemSpec,
    phi0: &ControlPath,
    options: &PgdOptions,
) -> Result<OptimizeReport> {
    phi0.check_for(spec)?;
    if !phi0.is_admissible(spec) {
        return Err(Error::Inadmissible("initial control leaves the box".into()));
    }
    if !(options.step0 > 0.0 && options.backtrack > 0.0 && options.backtrack < 1.0 && options.min_step > 0.0) {
        return Err(Error::invalid("step0, min_step must be positive and backtrack in (0,1)"));
    }
    let batch = options.batch(spec)?;
    let settings = GradientSettings {
        method: options.method,
        basis: RegressionBasis::new(options.n_feat.min(spec.n_modes())),
    };
    let dt = spec.dt();
    let residual = |phi: &ControlPath, g: &GradientPath| -> Result<f64> {
        Ok(smp_residual_of(spec, phi, &g.values)?.into_iter().fold(0.0, f64::max))
    };

    let mut phi = phi0.clone();
    let mut grad = estimate_gradient_with(spec, &phi, &batch, &settings)?;
    let initial_residual = residual(&phi, &grad)?;
    let target = options.tol_abs.max(options.tol_rel * initial_residual);
    let mut report = OptimizeReport {
        iterates: vec![grad.cost.mean],
        std_errs: vec![grad.cost.std_err],
        smp_residual_history: vec![initial_residual],
        steps: vec![0.0],
        line_search_log: Vec::new(),
        final_control: phi.clone(),
        status: PgdStatus::MaxIters,
        initial_residual,
        final_residual: initial_residual,
        options: options.clone(),
    };
    let mut res = initial_residual;
    let mut step = options.step0;
    for iter in 1..=options.max_iters {
        if res <= target {
            report.status = PgdStatus::Converged;
            break;
        }
        let cost = grad.cost.mean;
        let mut accepted = None;
        while step >= options.min_step {
            let trial = phi.add_scaled(-step, &grad.as_control())?.project(spec);
            let decrease = grad.directional(&phi.add_scaled(-1.0, &trial)?, dt)?;
            let trial_cost = batch_cost(spec, &trial, &batch)?;
            let ok = trial_cost < cost && trial_cost <= cost - options.c1 * decrease;
            report.line_search_log.push(LineSearchTrial {
                iter,
                step,
                trial_cost,
                accepted: ok,
            });
            if ok {
                accepted = Some(trial);
                break;
            }
            step *= options.backtrack;
        }
        let Some(next) = accepted else {
            report.status = PgdStatus::Stalled;
            break;
        };
        phi = next;
        grad = estimate_gradient_with(spec, &phi, &batch, &settings)?;
        res = residual(&phi, &grad)?;
        report.iterates.push(grad.cost.mean);
        report.std_errs.push(grad.cost.std_err);
        report.smp_residual_history.push(res);
        report.steps.push(step);
        step = (2.0 * step).min(options.step0);
    }
    if report.status == PgdStatus::MaxIters && res <= target {
        report.status = PgdStatus::Converged;
    }
    report.final_control = phi;
    report.final_residual = res;
    Ok(report)
}
