//! Linearized equation along a forward path and the perturbation diagnostics
//! for convex control variations `Φ_ε = Φ* + εΦ̃`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::forward::{simulate_path, write_states_csv, ControlPath, ForwardPath};
use crate::models::ProblemSpec;
use crate::spectral::SpectralField;
use crate::stats::loglog_slope;
use crate::wiener::{PathBatch, WienerPath};

/// `P_0..P_N` with `P_0 = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityPath {
    pub states: Vec<SpectralField>,
}

impl SensitivityPath {
    pub fn write_csv<W: Write>(&self, mut w: W, dt: f64) -> std::io::Result<()> {
        write_states_csv(&mut w, &self.states, dt)
    }
}

fn check_pairing(forward: &ForwardPath, wiener: &WienerPath) -> Result<()> {
    if forward.wiener_id != wiener.id() || forward.seed != wiener.seed() {
        return Err(Error::WienerMismatch(format!(
            "forward path was driven by {:?} (seed {}), got {:?} (seed {})",
            forward.wiener_id,
            forward.seed,
            wiener.id(),
            wiener.seed()
        )));
    }
    if let Some(step) = forward.blowup_step {
        return Err(Error::BlowUp { step });
    }
    Ok(())
}

/// Scheme for the linearized equation, with the same implicit treatment of
/// `A` and the same increments as the forward path:
/// `P_{k+1} = D ⊙ (P_k + Δt·[B_u(u_k)P_k + GΦ̃_k] + (Ξ'(u_k)P_k)·dW_k)`.
pub fn simulate_linearized(
    spec: &ProblemSpec,
    forward: &ForwardPath,
    direction: &ControlPath,
    wiener: &WienerPath,
) -> Result<SensitivityPath> {
    direction.check_for(spec)?;
    spec.check_wiener(wiener)?;
    check_pairing(forward, wiener)?;
    check_len(spec.n_steps + 1, forward.states.len())?;
    let dt = spec.dt();
    let n = spec.n_modes();
    let mut states = Vec::with_capacity(spec.n_steps + 1);
    states.push(SpectralField::zeros(n));
    for k in 0..spec.n_steps {
        let (u, p) = (&forward.states[k], &states[k]);
        let mut rhs = spec.drift_jvp_unchecked(u, p);
        rhs.axpy(1.0, &spec.gain_apply(direction.step(k)));
        let mut next = p.clone();
        next.axpy(dt, &rhs);
        next.axpy(1.0, &spec.noise_jvp_apply(u, p, wiener.row(k)));
        for (c, d) in next.coeffs_mut().iter_mut().zip(spec.implicit_factors()) {
            *c *= d;
        }
        if !next.is_finite() {
            return Err(Error::BlowUp { step: k + 1 });
        }
        states.push(next);
    }
    Ok(SensitivityPath { states })
}

/// Perturbed run and remainder `Δ_ε = (u_ε − u* − εP)/ε` on one path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaEpsPath {
    pub eps: f64,
    pub remainder: Vec<SpectralField>,
    pub star: ForwardPath,
    pub perturbed: ForwardPath,
    pub sensitivity: SensitivityPath,
}

pub(crate) fn check_perturbation(
    spec: &ProblemSpec,
    phi_star: &ControlPath,
    direction: &ControlPath,
    eps: f64,
) -> Result<ControlPath> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("eps must lie in (0, 1], got {eps}")));
    }
    phi_star.check_for(spec)?;
    direction.check_for(spec)?;
    let perturbed = phi_star.add_scaled(eps, direction)?;
    if let Some(k) = (0..spec.n_steps).find(|&k| !spec.controls.contains(perturbed.step(k))) {
        return Err(Error::Inadmissible(format!(
            "Φ* + {eps}·Φ̃ leaves the control set at step {k}"
        )));
    }
    Ok(perturbed)
}

fn remainder(star: &ForwardPath, perturbed: &ForwardPath, p: &SensitivityPath, eps: f64) -> Vec<SpectralField> {
    star.states
        .iter()
        .zip(&perturbed.states)
        .zip(&p.states)
        .map(|((us, ue), pk)| {
            let mut d = ue.sub(us);
            d.axpy(-eps, pk);
            d.scaled(1.0 / eps)
        })
        .collect()
}

pub fn delta_eps_path(
    spec: &ProblemSpec,
    u0: &SpectralField,
    phi_star: &ControlPath,
    direction: &ControlPath,
    eps: f64,
    wiener: &WienerPath,
) -> Result<DeltaEpsPath> {
    let perturbed_control = check_perturbation(spec, phi_star, direction, eps)?;
    let star = simulate_path(spec, u0, phi_star, wiener)?;
    let perturbed = simulate_path(spec, u0, &perturbed_control, wiener)?;
    if let Some(step) = perturbed.blowup_step {
        return Err(Error::BlowUp { step });
    }
    let sensitivity = simulate_linearized(spec, &star, direction, wiener)?;
    Ok(DeltaEpsPath {
        eps,
        remainder: remainder(&star, &perturbed, &sensitivity, eps),
        star,
        perturbed,
        sensitivity,
    })
}

/// Interpolation points `r` for the fourth-moment diagnostic of `e₁`.
pub const E1_R_VALUES: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpsScalingReport {
    pub eps_values: Vec<f64>,
    /// `sup_k E‖u_ε(t_k) − u*(t_k)‖²`
    pub sup_sq_err: Vec<f64>,
    /// `sup_k E[e(t_k)‖u_ε(t_k) − u*(t_k)‖²]`, `e(t) = exp(−∫₀ᵗ K + ρ(u*))`
    pub sup_sq_err_weighted: Vec<f64>,
    /// `sup_k E‖Δ_ε(t_k)‖²`
    pub sup_delta_sq: Vec<f64>,
    /// `E[e₁(T)⁻⁴]` for each `r` in [`E1_R_VALUES`], per ε.
    pub e1_fourth_moment: Vec<[f64; 3]>,
    pub slope_sq_err: f64,
    pub slope_sq_err_weighted: f64,
    pub slope_delta_sq: f64,
    pub n_paths: usize,
}

struct PathScaling {
    // per ε, per step
    sq_err: Vec<Vec<f64>>,
    sq_err_weighted: Vec<Vec<f64>>,
    delta_sq: Vec<Vec<f64>>,
    e1_inv4: Vec<[f64; 3]>,
}

fn scale_one_path(
    spec: &ProblemSpec,
    u0: &SpectralField,
    phi_star: &ControlPath,
    direction: &ControlPath,
    perturbed: &[ControlPath],
    eps_list: &[f64],
    wiener: &WienerPath,
) -> Result<PathScaling> {
    let dt = spec.dt();
    let star = simulate_path(spec, u0, phi_star, wiener)?;
    if let Some(step) = star.blowup_step {
        return Err(Error::BlowUp { step });
    }
    let p = simulate_linearized(spec, &star, direction, wiener)?;
    let k_const = spec.drift.constants.k;
    let mut weight = Vec::with_capacity(spec.n_steps + 1);
    let mut acc = 0.0_f64;
    for u in &star.states {
        weight.push((-acc).exp());
        acc += dt * (k_const + spec.rho(u));
    }
    let mut out = PathScaling {
        sq_err: Vec::new(),
        sq_err_weighted: Vec::new(),
        delta_sq: Vec::new(),
        e1_inv4: Vec::new(),
    };
    for (ctl, &eps) in perturbed.iter().zip(eps_list) {
        let pert = simulate_path(spec, u0, ctl, wiener)?;
        if let Some(step) = pert.blowup_step {
            return Err(Error::BlowUp { step });
        }
        let diff_sq: Vec<f64> = star
            .states
            .iter()
            .zip(&pert.states)
            .map(|(a, b)| b.sub(a).norm_sq())
            .collect();
        out.sq_err_weighted
            .push(diff_sq.iter().zip(&weight).map(|(d, w)| d * w).collect());
        out.sq_err.push(diff_sq);
        out.delta_sq.push(
            remainder(&star, &pert, &p, eps)
                .iter()
                .map(SpectralField::norm_sq)
                .collect(),
        );
        let mut e1 = [0.0; 3];
        for (slot, r) in e1.iter_mut().zip(E1_R_VALUES) {
            let integral: f64 = (0..spec.n_steps)
                .map(|k| {
                    let mut x = star.states[k].clone();
                    x.axpy(r, &pert.states[k].sub(&star.states[k]));
                    dt * spec.rho1(&x).powi(2)
                })
                .sum();
            *slot = (4.0 * integral).exp();
        }
        out.e1_inv4.push(e1);
    }
    Ok(out)
}

/// Common-batch scaling study over a strictly decreasing `eps_list`.
pub fn eps_scaling_report(
    spec: &ProblemSpec,
    u0: &SpectralField,
    phi_star: &ControlPath,
    direction: &ControlPath,
    eps_list: &[f64],
    batch: &PathBatch,
) -> Result<EpsScalingReport> {
    if eps_list.is_empty() {
        return Err(Error::invalid("eps_list is empty"));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("eps_list must be strictly decreasing"));
    }
    let perturbed = eps_list
        .iter()
        .map(|&e| check_perturbation(spec, phi_star, direction, e))
        .collect::<Result<Vec<_>>>()?;
    let per_path = batch
        .paths()
        .par_iter()
        .map(|w| scale_one_path(spec, u0, phi_star, direction, &perturbed, eps_list, w))
        .collect::<Result<Vec<_>>>()?;

    let n_paths = per_path.len() as f64;
    let steps = spec.n_steps + 1;
    let sup_of_mean = |pick: &dyn Fn(&PathScaling) -> &Vec<Vec<f64>>, ie: usize| -> f64 {
        (0..steps)
            .map(|k| per_path.iter().map(|p| pick(p)[ie][k]).sum::<f64>() / n_paths)
            .fold(0.0, f64::max)
    };
    let mut report = EpsScalingReport {
        eps_values: eps_list.to_vec(),
        sup_sq_err: Vec::new(),
        sup_sq_err_weighted: Vec::new(),
        sup_delta_sq: Vec::new(),
        e1_fourth_moment: Vec::new(),
        slope_sq_err: f64::NAN,
        slope_sq_err_weighted: f64::NAN,
        slope_delta_sq: f64::NAN,
        n_paths: per_path.len(),
    };
    for ie in 0..eps_list.len() {
        report.sup_sq_err.push(sup_of_mean(&|p| &p.sq_err, ie));
        report.sup_sq_err_weighted.push(sup_of_mean(&|p| &p.sq_err_weighted, ie));
        report.sup_delta_sq.push(sup_of_mean(&|p| &p.delta_sq, ie));
        let mut m = [0.0; 3];
        for (i, slot) in m.iter_mut().enumerate() {
            *slot = per_path.iter().map(|p| p.e1_inv4[ie][i]).sum::<f64>() / n_paths;
        }
        report.e1_fourth_moment.push(m);
    }
    report.slope_sq_err = loglog_slope(eps_list, &report.sup_sq_err);
    report.slope_sq_err_weighted = loglog_slope(eps_list, &report.sup_sq_err_weighted);
    report.slope_delta_sq = loglog_slope(eps_list, &report.sup_delta_sq);
    Ok(report)
}

impl EpsScalingReport {
    /// CSV `eps, sup_sq_err, sup_sq_err_weighted, sup_delta_sq, slope`, where
    /// `slope` is the local log-log slope of `sup_sq_err` to the previous row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "eps,sup_sq_err,sup_sq_err_weighted,sup_delta_sq,slope")?;
        for i in 0..self.eps_values.len() {
            let slope = if i == 0 {
                String::new()
            } else {
                loglog_slope(&self.eps_values[i - 1..=i], &self.sup_sq_err[i - 1..=i]).to_string()
            };
            writeln!(
                w,
                "{},{},{},{},{slope}",
                self.eps_values[i], self.sup_sq_err[i], self.sup_sq_err_weighted[i], self.sup_delta_sq[i]
            )?;
        }
        Ok(())
    }
}

/// Term-by-term first-order expansion of the cost along `Φ_ε = Φ* + εΦ̃`:
/// `lhs = 𝒥(Φ_ε) − 𝒥(Φ*)` against
/// `rhs = εE⟨𝒦'(u*_N), P_N⟩ + εE Σ_k Δt⟨ℒ_u(u*_k), P_k⟩ + E Σ_k Δt[ℒ(u*_k, φ_ε,k) − ℒ(u*_k, φ*_k)]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostExpansionReport {
    pub eps_values: Vec<f64>,
    pub lhs: Vec<f64>,
    pub terminal_term: Vec<f64>,
    pub running_state_term: Vec<f64>,
    pub control_term: Vec<f64>,
    /// `|lhs − rhs|`
    pub remainder: Vec<f64>,
    pub remainder_slope: f64,
    pub n_paths: usize,
}

impl CostExpansionReport {
    pub fn rhs(&self, i: usize) -> f64 {
        self.terminal_term[i] + self.running_state_term[i] + self.control_term[i]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "eps,lhs,terminal_term,running_state_term,control_term,remainder,remainder_over_eps2")?;
        for (i, eps) in self.eps_values.iter().enumerate() {
            writeln!(
                w,
                "{eps},{},{},{},{},{},{}",
                self.lhs[i],
                self.terminal_term[i],
                self.running_state_term[i],
                self.control_term[i],
                self.remainder[i],
                self.remainder[i] / (eps * eps)
            )?;
        }
        Ok(())
    }
}

pub fn cost_expansion(
    spec: &ProblemSpec,
    phi_star: &ControlPath,
    direction: &ControlPath,
    eps_list: &[f64],
    batch: &PathBatch,
) -> Result<CostExpansionReport> {
    if eps_list.is_empty() {
        return Err(Error::invalid("eps_list is empty"));
    }
    let perturbed = eps_list
        .iter()
        .map(|&e| check_perturbation(spec, phi_star, direction, e))
        .collect::<Result<Vec<_>>>()?;
    let dt = spec.dt();
    let n_steps = spec.n_steps;
    // per path, per ε: [lhs, terminal, running state, control]
    let per_path = batch
        .paths()
        .par_iter()
        .map(|w| -> Result<Vec<[f64; 4]>> {
            let star = simulate_path(spec, &spec.u0, phi_star, w)?;
            if let Some(step) = star.blowup_step {
                return Err(Error::BlowUp { step });
            }
            let p = simulate_linearized(spec, &star, direction, w)?;
            let base = spec.path_cost_unchecked(&star.states, phi_star);
            let terminal = spec.terminal_grad(&star.states[n_steps]).dot(&p.states[n_steps]);
            let running: f64 = dt
                * (0..n_steps)
                    .map(|k| spec.running_grad_u(&star.states[k]).dot(&p.states[k]))
                    .sum::<f64>();
            perturbed
                .iter()
                .zip(eps_list)
                .map(|(ctl, &eps)| {
                    let pert = simulate_path(spec, &spec.u0, ctl, w)?;
                    if let Some(step) = pert.blowup_step {
                        return Err(Error::BlowUp { step });
                    }
                    let control: f64 = dt
                        * (0..n_steps)
                            .map(|k| {
                                spec.running_value(&star.states[k], ctl.step(k))
                                    - spec.running_value(&star.states[k], phi_star.step(k))
                            })
                            .sum::<f64>();
                    Ok([
                        spec.path_cost_unchecked(&pert.states, ctl) - base,
                        eps * terminal,
                        eps * running,
                        control,
                    ])
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let n_paths = per_path.len() as f64;
    let mean = |ie: usize, j: usize| per_path.iter().map(|p| p[ie][j]).sum::<f64>() / n_paths;
    let mut report = CostExpansionReport {
        eps_values: eps_list.to_vec(),
        lhs: Vec::new(),
        terminal_term: Vec::new(),
        running_state_term: Vec::new(),
        control_term: Vec::new(),
        remainder: Vec::new(),
        remainder_slope: f64::NAN,
        n_paths: per_path.len(),
    };
    for ie in 0..eps_list.len() {
        report.lhs.push(mean(ie, 0));
        report.terminal_term.push(mean(ie, 1));
        report.running_state_term.push(mean(ie, 2));
        report.control_term.push(mean(ie, 3));
        report.remainder.push((report.lhs[ie] - report.rhs(ie)).abs());
    }
    report.remainder_slope = loglog_slope(eps_list, &report.remainder);
    Ok(report)
}
