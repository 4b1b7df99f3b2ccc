//! Closed-form and QP references for the linear-quadratic class: `F ≡ 0`,
//! additive noise, quadratic cost. For deterministic controls the expected
//! cost equals the noise-free cost plus a control-independent constant, so the
//! optimum is that of the noise-free discrete problem
//! `u_{k+1} = a ⊙ u_k + bφ_k`, `a = D`, `b = Δt·diag(D)·G`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::adjoint::AdjointMethod;
use crate::error::{Error, Result};
use crate::forward::ControlPath;
use crate::models::{DriftKind, NoiseKind, NoiseModel, ProblemSpec};
use crate::optimizer::{estimate_gradient, smp_residual_of};
use crate::spectral::SpectralField;
use crate::wiener::{PathBatch, WienerPath};

fn is_linear(spec: &ProblemSpec) -> bool {
    spec.drift.kind == DriftKind::LinearControl || (spec.drift.kind == DriftKind::CubicReaction && spec.drift.c3 == 0.0)
}

/// True when the problem is in the class the oracles cover.
pub fn is_lq(spec: &ProblemSpec) -> bool {
    is_linear(spec) && spec.noise.kind == NoiseKind::Additive
}

fn require_lq(spec: &ProblemSpec) -> Result<()> {
    if is_lq(spec) {
        Ok(())
    } else {
        Err(Error::invalid("oracle needs a linear drift with additive noise"))
    }
}

fn noise_free(spec: &ProblemSpec) -> Result<(ProblemSpec, PathBatch)> {
    let det = spec
        .clone()
        .with_noise(NoiseModel::zero(spec.n_modes(), spec.m_noise()))?;
    let batch = PathBatch::new(vec![WienerPath::zeros(spec.n_steps, spec.m_noise(), spec.dt())?])?;
    Ok((det, batch))
}

fn gain_matrix(spec: &ProblemSpec) -> DMatrix<f64> {
    DMatrix::from_fn(spec.n_modes(), spec.d_control(), |i, j| spec.drift.gain_entry(i, j))
}

/// Unconstrained optimal control from `spec.u0` by the backward Riccati
/// recursion; the box is ignored. Needs zero reference states.
pub fn riccati_control(spec: &ProblemSpec) -> Result<ControlPath> {
    require_lq(spec)?;
    if spec.cost.has_tracking_references() {
        return Err(Error::invalid("Riccati oracle needs zero reference states"));
    }
    let n = spec.n_modes();
    let d = spec.d_control();
    let dt = spec.dt();
    let (q, r, g) = (spec.cost.q, spec.cost.r, spec.cost.g);
    let a = DMatrix::from_diagonal(&DVector::from_column_slice(spec.implicit_factors()));
    let b = &a * gain_matrix(spec) * dt;
    let mut p = DMatrix::identity(n, n) * g;
    let mut gains = vec![DMatrix::zeros(d, n); spec.n_steps];
    for k in (0..spec.n_steps).rev() {
        let m = DMatrix::identity(d, d) * (dt * r) + b.transpose() * &p * &b;
        let chol = m.cholesky().ok_or_else(|| Error::invalid("Riccati step lost definiteness"))?;
        let kk = chol.solve(&(b.transpose() * &p * &a));
        p = DMatrix::identity(n, n) * (dt * q) + a.transpose() * &p * &a - a.transpose() * &p * &b * &kk;
        p = (&p + p.transpose()) * 0.5;
        gains[k] = kk;
    }
    let mut u = DVector::from_column_slice(spec.u0.coeffs());
    let mut values = Vec::with_capacity(spec.n_steps);
    for kk in &gains {
        let phi = -(kk * &u);
        u = &a * &u + &b * &phi;
        values.push(phi.iter().copied().collect());
    }
    ControlPath::new(values)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KktSolution {
    pub control: ControlPath,
    pub sweeps: usize,
    /// Largest box-vertex residual of the exact gradient at the solution.
    pub smp_residual: f64,
}

/// Box-constrained optimum of the noise-free discrete problem, by projected
/// coordinate descent on the condensed quadratic program.
pub fn kkt_control(spec: &ProblemSpec) -> Result<KktSolution> {
    require_lq(spec)?;
    let (det, batch) = noise_free(spec)?;
    let n_steps = spec.n_steps;
    let d = spec.d_control();
    let p = n_steps * d;
    let dt = spec.dt();
    // Euclidean gradient in the stacked control is Δt·g_k.
    let grad = |x: &[f64]| -> Result<Vec<f64>> {
        let c = ControlPath::new(x.chunks(d).map(<[f64]>::to_vec).collect())?;
        let g = estimate_gradient(&det, &c, &batch, AdjointMethod::DiscreteAdjoint)?;
        Ok(g.values.into_iter().flatten().map(|v| dt * v).collect())
    };
    let zero = vec![0.0; p];
    let lin = grad(&zero)?;
    let mut hess = DMatrix::zeros(p, p);
    let mut e = zero.clone();
    for j in 0..p {
        e[j] = 1.0;
        let col = grad(&e)?;
        for i in 0..p {
            hess[(i, j)] = col[i] - lin[i];
        }
        e[j] = 0.0;
    }
    let hess = (&hess + hess.transpose()) * 0.5;

    let lo: Vec<f64> = (0..p).map(|i| spec.controls.lower[i % d]).collect();
    let hi: Vec<f64> = (0..p).map(|i| spec.controls.upper[i % d]).collect();
    let mut x: Vec<f64> = (0..p).map(|i| 0.0_f64.clamp(lo[i], hi[i])).collect();
    let mut gx: Vec<f64> = (0..p)
        .map(|i| lin[i] + (0..p).map(|j| hess[(i, j)] * x[j]).sum::<f64>())
        .collect();
    let mut sweeps = 0;
    for sweep in 1..=200_000 {
        sweeps = sweep;
        let mut biggest = 0.0_f64;
        for i in 0..p {
            let next = (x[i] - gx[i] / hess[(i, i)]).clamp(lo[i], hi[i]);
            let delta = next - x[i];
            if delta != 0.0 {
                for j in 0..p {
                    gx[j] += hess[(j, i)] * delta;
                }
                x[i] = next;
                biggest = biggest.max(delta.abs() / (1.0 + next.abs()));
            }
        }
        if biggest < 1e-14 {
            break;
        }
    }
    let control = ControlPath::new(x.chunks(d).map(<[f64]>::to_vec).collect())?;
    let exact = estimate_gradient(&det, &control, &batch, AdjointMethod::DiscreteAdjoint)?;
    let smp_residual = smp_residual_of(spec, &control, &exact.values)?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(KktSolution {
        control,
        sweeps,
        smp_residual,
    })
}

/// `E[v_k]` at a fixed control: the noise-free discrete costate.
pub fn mean_costates(spec: &ProblemSpec, control: &ControlPath) -> Result<Vec<SpectralField>> {
    require_lq(spec)?;
    let (det, batch) = noise_free(spec)?;
    let fw = crate::forward::simulate_path(&det, &det.u0, control, &batch.paths()[0])?;
    Ok(crate::adjoint::solve_discrete_adjoint(&det, &fw, control, &batch.paths()[0])?.costates)
}

/// Diagonal costate sensitivity `S_k = ∂v_k/∂u_k` at fixed control:
/// `S_N = g`, `S_k = D²S_{k+1} + Δt·q`.
pub fn costate_sensitivity(spec: &ProblemSpec) -> Result<Vec<Vec<f64>>> {
    require_lq(spec)?;
    let dt = spec.dt();
    let dd = spec.implicit_factors();
    let mut s = vec![vec![spec.cost.g; spec.n_modes()]; spec.n_steps + 1];
    for k in (0..spec.n_steps).rev() {
        s[k] = (0..spec.n_modes())
            .map(|j| dd[j] * dd[j] * s[k + 1][j] + dt * spec.cost.q)
            .collect();
    }
    Ok(s)
}

/// `E[Z_k]_{jj} = D_j²·S_{k+1,j}·σ_j` for the regression estimate of `Z`.
pub fn expected_z_diag(spec: &ProblemSpec) -> Result<Vec<Vec<f64>>> {
    let s = costate_sensitivity(spec)?;
    let dd = spec.implicit_factors();
    let active = spec.n_modes().min(spec.m_noise());
    Ok((0..spec.n_steps)
        .map(|k| {
            (0..active)
                .map(|j| dd[j] * dd[j] * s[k + 1][j] * spec.noise.sigma[j])
                .collect()
        })
        .collect())
}
