//! Semi-implicit Euler–Maruyama for the truncated controlled equation
//!
//! ```text
//! u_{k+1} = D ⊙ (u_k + Δt·B(u_k, φ_k) + Ξ(u_k)·dW_k),   D_j = 1/(1 − Δt·diag_j)
//! ```
//!
//! and Monte Carlo estimation of the cost.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::models::ProblemSpec;
use crate::spectral::SpectralField;
use crate::stats::mean_and_std_err;
use crate::wiener::{PathBatch, PathId, WienerPath};

/// Piecewise-constant control: `values[k]` acts on `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    values: Vec<Vec<f64>>,
}

impl ControlPath {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let d = values
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("control path needs at least one step"))?;
        if d == 0 {
            return Err(Error::invalid("control dimension must be positive"));
        }
        for v in &values {
            check_len(d, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        Ok(Self { values })
    }

    pub fn constant(n_steps: usize, phi: &[f64]) -> Result<Self> {
        Self::new(vec![phi.to_vec(); n_steps])
    }

    pub fn zeros(n_steps: usize, d: usize) -> Result<Self> {
        Self::new(vec![vec![0.0; d]; n_steps])
    }

    /// Zero control matching the grid and control dimension of `spec`.
    pub fn zeros_for(spec: &ProblemSpec) -> Self {
        Self {
            values: vec![vec![0.0; spec.d_control()]; spec.n_steps],
        }
    }

    pub(crate) fn from_vec_unchecked(values: Vec<Vec<f64>>) -> Self {
        Self { values }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn is_admissible(&self, spec: &ProblemSpec) -> bool {
        self.values.iter().all(|v| spec.controls.contains(v))
    }

    pub fn project(&self, spec: &ProblemSpec) -> Self {
        Self {
            values: self.values.iter().map(|v| spec.controls.project(v)).collect(),
        }
    }

    /// `self + alpha·other`
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + alpha * y).collect())
                .collect(),
        })
    }

    /// `Σ_k Δt·⟨self_k, other_k⟩`
    pub fn inner_dt(&self, other: &Self, dt: f64) -> Result<f64> {
        self.check_same(other)?;
        Ok(dt
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
                .sum::<f64>())
    }

    /// `(Σ_k Δt·‖φ_k‖²)^½`
    pub fn norm_l2(&self, dt: f64) -> f64 {
        self.inner_dt(self, dt).unwrap_or(0.0).sqrt()
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        check_len(self.n_steps(), other.n_steps())?;
        check_len(self.dim(), other.dim())
    }

    pub(crate) fn check_for(&self, spec: &ProblemSpec) -> Result<()> {
        check_len(spec.n_steps, self.n_steps())?;
        check_len(spec.d_control(), self.dim())
    }
}

/// States `u_0..u_N` on `t_k = k·Δt`; truncated after a guard hit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardPath {
    pub states: Vec<SpectralField>,
    pub seed: u64,
    pub wiener_id: PathId,
    /// First step whose state was non-finite or exceeded the guard.
    pub blowup_step: Option<usize>,
}

impl ForwardPath {
    pub fn is_valid(&self) -> bool {
        self.blowup_step.is_none()
    }

    pub fn terminal(&self) -> &SpectralField {
        self.states.last().expect("forward path has at least u_0")
    }

    /// CSV with columns `step, t, a_1..a_n`.
    pub fn write_csv<W: Write>(&self, mut w: W, dt: f64) -> std::io::Result<()> {
        write_states_csv(&mut w, &self.states, dt)
    }
}

pub(crate) fn write_states_csv<W: Write>(w: &mut W, states: &[SpectralField], dt: f64) -> std::io::Result<()> {
    let n = states.first().map_or(0, SpectralField::len);
    write!(w, "step,t")?;
    for k in 1..=n {
        write!(w, ",a{k}")?;
    }
    writeln!(w)?;
    for (k, s) in states.iter().enumerate() {
        write!(w, "{k},{}", k as f64 * dt)?;
        for c in s.coeffs() {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

impl ProblemSpec {
    pub(crate) fn step_unchecked(&self, u: &SpectralField, phi: &[f64], dw: &[f64]) -> SpectralField {
        let dt = self.dt();
        let mut rhs = self.drift_state(u);
        rhs.axpy(1.0, &self.gain_apply(phi));
        let mut next = u.clone();
        next.axpy(dt, &rhs);
        next.axpy(1.0, &self.noise_apply(u, dw));
        for (c, d) in next.coeffs_mut().iter_mut().zip(self.implicit_factors()) {
            *c *= d;
        }
        next
    }

    pub(crate) fn check_wiener(&self, wiener: &WienerPath) -> Result<()> {
        if wiener.n_steps() != self.n_steps || wiener.m_noise() != self.m_noise() {
            return Err(Error::WienerMismatch(format!(
                "path is {}×{}, problem needs {}×{}",
                wiener.n_steps(),
                wiener.m_noise(),
                self.n_steps,
                self.m_noise()
            )));
        }
        let dt = self.dt();
        if (wiener.dt() - dt).abs() > 1e-12 * dt {
            return Err(Error::WienerMismatch(format!(
                "path dt {} differs from problem dt {dt}",
                wiener.dt()
            )));
        }
        Ok(())
    }

    /// Pathwise cost `Σ_k Δt·ℒ(u_k, φ_k) + 𝒦(u_N)`.
    pub(crate) fn path_cost_unchecked(&self, states: &[SpectralField], control: &ControlPath) -> f64 {
        let dt = self.dt();
        let running: f64 = (0..self.n_steps)
            .map(|k| self.running_value(&states[k], control.step(k)))
            .sum();
        dt * running + self.terminal_value(&states[self.n_steps])
    }
}

/// One step of the scheme.
pub fn forward_step(
    spec: &ProblemSpec,
    u: &SpectralField,
    phi: &[f64],
    dw: &[f64],
) -> Result<SpectralField> {
    check_len(spec.n_modes(), u.len())?;
    check_len(spec.d_control(), phi.len())?;
    check_len(spec.m_noise(), dw.len())?;
    let next = spec.step_unchecked(u, phi, dw);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::NonFinite)
    }
}

/// Integrates from `u0` with the increments of `wiener`, stopping at the
/// first state that is non-finite or trips the guard on `‖u_k‖²` or
/// `Σ_j Δt‖u_j‖_V²`.
pub fn simulate_path(
    spec: &ProblemSpec,
    u0: &SpectralField,
    control: &ControlPath,
    wiener: &WienerPath,
) -> Result<ForwardPath> {
    check_len(spec.n_modes(), u0.len())?;
    control.check_for(spec)?;
    spec.check_wiener(wiener)?;
    let dt = spec.dt();
    let mut states = Vec::with_capacity(spec.n_steps + 1);
    let mut integral = 0.0;
    let mut blowup_step = None;
    let mut u = u0.clone();
    for k in 0..=spec.n_steps {
        if !u.is_finite() {
            blowup_step = Some(k);
            break;
        }
        integral += dt * spec.space.v_norm_sq(&u);
        let exceeded = u.norm_sq() > spec.guard || integral > spec.guard;
        states.push(u);
        if exceeded {
            blowup_step = Some(k);
            break;
        }
        if k < spec.n_steps {
            u = spec.step_unchecked(&states[k], control.step(k), wiener.row(k));
        } else {
            break;
        }
    }
    Ok(ForwardPath {
        states,
        seed: wiener.seed(),
        wiener_id: wiener.id(),
        blowup_step,
    })
}

/// Paths of `batch` in batch order; parallel over paths.
pub fn simulate_batch(
    spec: &ProblemSpec,
    u0: &SpectralField,
    control: &ControlPath,
    batch: &PathBatch,
) -> Result<Vec<ForwardPath>> {
    batch
        .paths()
        .par_iter()
        .map(|w| simulate_path(spec, u0, control, w))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
    pub invalid_paths: usize,
    pub valid: bool,
}

/// Per-path costs; `None` for a path that hit the guard.
pub fn pathwise_costs(
    spec: &ProblemSpec,
    paths: &[ForwardPath],
    control: &ControlPath,
) -> Result<Vec<Option<f64>>> {
    control.check_for(spec)?;
    Ok(paths
        .iter()
        .map(|p| p.is_valid().then(|| spec.path_cost_unchecked(&p.states, control)))
        .collect())
}

/// Left-endpoint estimate of `𝒥(Φ)` over `batch`; any blown-up path marks
/// the estimate invalid.
pub fn estimate_cost(
    spec: &ProblemSpec,
    u0: &SpectralField,
    control: &ControlPath,
    batch: &PathBatch,
) -> Result<CostEstimate> {
    let paths = simulate_batch(spec, u0, control, batch)?;
    summarize_costs(spec, &paths, control)
}

pub(crate) fn summarize_costs(
    spec: &ProblemSpec,
    paths: &[ForwardPath],
    control: &ControlPath,
) -> Result<CostEstimate> {
    let costs = pathwise_costs(spec, paths, control)?;
    let valid: Vec<f64> = costs.iter().flatten().copied().collect();
    let invalid_paths = costs.len() - valid.len();
    let (mean, std_err) = mean_and_std_err(&valid);
    Ok(CostEstimate {
        mean,
        std_err,
        n_paths: costs.len(),
        invalid_paths,
        valid: invalid_paths == 0 && !valid.is_empty(),
    })
}
