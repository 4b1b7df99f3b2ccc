//! Problem data: the linear operator `A`, drift `B(u,Φ) = F(u) + GΦ`, noise
//! coefficient `Ξ(u)`, running/terminal costs, and the admissible control box.

mod assumptions;
mod builtin;
mod config;
mod cost;
mod drift;
mod noise;

pub use assumptions::{check_assumptions, AssumptionReport, Violation};
pub use builtin::BuiltinModel;
pub use config::{
    ControlsSection, CostSection, DriftSection, NoiseSection, ProblemConfig, SpaceSection,
    TimeSection,
};
pub use cost::{CostModel, RunningCost, TerminalCost};
pub use drift::{DriftConstants, DriftKind, DriftModel};
pub use noise::{NoiseKind, NoiseModel};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::spectral::{SpectralField, SpectralSpace};

/// Diagonal linear part: `(A a)_k = diag_k · a_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearOperatorSpec {
    pub diag: Vec<f64>,
    pub theta: f64,
}

impl LinearOperatorSpec {
    /// Dirichlet Laplacian, coercive with `θ = 2` under the gradient seminorm.
    pub fn laplacian(space: &SpectralSpace) -> Self {
        Self {
            diag: space.eigenvalues().iter().map(|l| -l).collect(),
            theta: 2.0,
        }
    }

    /// Exact coercivity margin `min_k (−2·diag_k − θ·λ_k)`; non-negative iff
    /// `2⟨Av,v⟩ ≤ −θ‖v‖_V²` for every `v`.
    pub fn coercivity_margin(&self, space: &SpectralSpace) -> f64 {
        self.diag
            .iter()
            .zip(space.eigenvalues())
            .map(|(d, l)| -2.0 * d - self.theta * l)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Box `𝒪₁ = Π [lower_i, upper_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::invalid("control dimension must be positive"));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l <= u) {
                return Err(Error::invalid(format!(
                    "control bound {i}: lower {l} exceeds upper {u}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, phi: &[f64]) -> bool {
        phi.len() == self.dim()
            && phi
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(p, (l, u))| *l <= *p && *p <= *u)
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(p, (l, u))| p.clamp(*l, *u))
            .collect()
    }
}

/// Complete problem data for the controlled equation on `[0, T]`.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub space: SpectralSpace,
    pub a_op: LinearOperatorSpec,
    pub drift: DriftModel,
    pub noise: NoiseModel,
    pub cost: CostModel,
    pub controls: ControlSet,
    pub horizon: f64,
    pub n_steps: usize,
    pub u0: SpectralField,
    /// Bound on `sup_k ‖u_k‖²` and `Σ_k Δt ‖u_k‖_V²` before a path is flagged.
    pub guard: f64,
    implicit: Vec<f64>,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: SpectralSpace,
        a_op: LinearOperatorSpec,
        drift: DriftModel,
        noise: NoiseModel,
        cost: CostModel,
        controls: ControlSet,
        horizon: f64,
        n_steps: usize,
        u0: SpectralField,
        guard: f64,
    ) -> Result<Self> {
        let n = space.n_modes();
        check_len(n, a_op.diag.len())?;
        if a_op.diag.iter().any(|d| !(d.is_finite() && *d < 0.0)) {
            return Err(Error::invalid("operator diagonal must be negative and finite"));
        }
        if !(a_op.theta > 0.0) {
            return Err(Error::invalid("theta must be positive"));
        }
        drift.validate(n, controls.dim())?;
        noise.validate(n)?;
        cost.validate(n)?;
        check_len(n, u0.len())?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be positive"));
        }
        if !(guard > 0.0) {
            return Err(Error::invalid("guard must be positive"));
        }
        let dt = horizon / n_steps as f64;
        let implicit = a_op.diag.iter().map(|d| 1.0 / (1.0 - dt * d)).collect();
        Ok(Self {
            space,
            a_op,
            drift,
            noise,
            cost,
            controls,
            horizon,
            n_steps,
            u0,
            guard,
            implicit,
        })
    }

    pub fn builtin(model: BuiltinModel, n_modes: usize, n_steps: usize) -> Result<Self> {
        builtin::build(model, n_modes, n_steps)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        ProblemConfig::parse(text)?.build(text)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn n_modes(&self) -> usize {
        self.space.n_modes()
    }

    pub fn m_noise(&self) -> usize {
        self.noise.m_noise
    }

    pub fn d_control(&self) -> usize {
        self.controls.dim()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Implicit-solve factors `D_j = 1/(1 − Δt·diag_j)`.
    pub fn implicit_factors(&self) -> &[f64] {
        &self.implicit
    }

    /// Same problem with a different time grid.
    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        Self::new(
            self.space.clone(),
            self.a_op.clone(),
            self.drift.clone(),
            self.noise.clone(),
            self.cost.clone(),
            self.controls.clone(),
            self.horizon,
            n_steps,
            self.u0.clone(),
            self.guard,
        )
    }

    pub fn with_u0(mut self, u0: SpectralField) -> Result<Self> {
        check_len(self.n_modes(), u0.len())?;
        self.u0 = u0;
        Ok(self)
    }

    pub fn with_cost(mut self, cost: CostModel) -> Result<Self> {
        cost.validate(self.n_modes())?;
        self.cost = cost;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        noise.validate(self.n_modes())?;
        self.noise = noise;
        Ok(self)
    }

    pub fn with_controls(mut self, controls: ControlSet) -> Result<Self> {
        self.drift.validate(self.n_modes(), controls.dim())?;
        self.controls = controls;
        Ok(self)
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    pub fn control_project(&self, phi_raw: &[f64]) -> Result<Vec<f64>> {
        check_len(self.d_control(), phi_raw.len())?;
        if phi_raw.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(self.controls.project(phi_raw))
    }

    /// Fully explicit configuration describing this problem.
    pub fn to_config(&self) -> ProblemConfig {
        ProblemConfig::from_spec(self)
    }

    /// Grid `t_k = k·Δt` for `k = 0..=n_steps`.
    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.n_steps).map(|k| k as f64 * dt).collect()
    }
}
