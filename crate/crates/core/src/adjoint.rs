//! Backward costate equation.
//!
//! The discrete adjoint is the exact transpose of the forward scheme:
//!
//! ```text
//! v_N = 𝒦'(u_N)
//! w_k = D ⊙ v_{k+1}
//! v_k = w_k + Δt·B_u(u_k)*w_k + (Ξ'(u_k)·dW_k)*w_k + Δt·ℒ_u(u_k, φ_k)
//! ```
//!
//! so `Σ_k Δt·⟨ℒ_Φ + Gᵀw_k, Φ̃_k⟩` is the derivative of the discretized
//! pathwise cost. The regression (LSMC) variant replaces `w_k` by
//! `D ⊙ E[v_{k+1} | u_k]` and the noise term by `Δt·∇_u⟨Ξ(u_k), Z_k⟩₂` with
//! `Z_k = D ⊙ E[v_{k+1} dW_kᵀ | u_k] / Δt`.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::forward::{write_states_csv, ControlPath, ForwardPath};
use crate::models::ProblemSpec;
use crate::sensitivity::SensitivityPath;
use crate::spectral::{hs_norm, HsOperator, SpectralField};
use crate::wiener::{PathBatch, WienerPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointMethod {
    DiscreteAdjoint,
    Lsmc,
}

impl AdjointMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::DiscreteAdjoint => "discrete-adjoint",
            Self::Lsmc => "lsmc",
        }
    }
}

impl FromStr for AdjointMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "discrete-adjoint" => Ok(Self::DiscreteAdjoint),
            "lsmc" => Ok(Self::Lsmc),
            _ => Err(format!("unknown method '{s}' (expected discrete-adjoint or lsmc)")),
        }
    }
}

impl std::fmt::Display for AdjointMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdjointPath {
    /// `v_0..v_N`
    pub costates: Vec<SpectralField>,
    /// `w_0..w_{N−1}`: the costate carried through the implicit solve, which
    /// pairs with `GΦ̃_k` in the control gradient.
    pub propagated: Vec<SpectralField>,
    /// `Z_0..Z_{N−1}`
    pub z_ops: Vec<HsOperator>,
    pub method: AdjointMethod,
}

impl AdjointPath {
    pub fn write_csv<W: Write>(&self, mut w: W, dt: f64) -> std::io::Result<()> {
        write_states_csv(&mut w, &self.costates, dt)
    }
}

fn check_forward(spec: &ProblemSpec, forward: &ForwardPath) -> Result<()> {
    if let Some(step) = forward.blowup_step {
        return Err(Error::BlowUp { step });
    }
    check_len(spec.n_steps + 1, forward.states.len())?;
    check_len(spec.n_modes(), forward.states[0].len())
}

fn implicit(spec: &ProblemSpec, v: &SpectralField) -> SpectralField {
    let mut w = v.clone();
    for (c, d) in w.coeffs_mut().iter_mut().zip(spec.implicit_factors()) {
        *c *= d;
    }
    w
}

pub fn solve_discrete_adjoint(
    spec: &ProblemSpec,
    forward: &ForwardPath,
    control: &ControlPath,
    wiener: &WienerPath,
) -> Result<AdjointPath> {
    control.check_for(spec)?;
    spec.check_wiener(wiener)?;
    check_forward(spec, forward)?;
    if forward.wiener_id != wiener.id() || forward.seed != wiener.seed() {
        return Err(Error::WienerMismatch("forward path was driven by a different path".into()));
    }
    let n_steps = spec.n_steps;
    let dt = spec.dt();
    let mut costates = vec![SpectralField::zeros(spec.n_modes()); n_steps + 1];
    let mut propagated = vec![SpectralField::zeros(spec.n_modes()); n_steps];
    let mut z_ops = vec![HsOperator::zeros(spec.n_modes(), spec.m_noise()); n_steps];
    costates[n_steps] = spec.terminal_grad(&forward.states[n_steps]);
    for k in (0..n_steps).rev() {
        let u = &forward.states[k];
        let w = implicit(spec, &costates[k + 1]);
        let mut v = w.clone();
        v.axpy(dt, &spec.drift_vjp_unchecked(u, &w));
        v.axpy(1.0, &spec.noise_vjp_directional(u, &w, wiener.row(k)));
        v.axpy(dt, &spec.running_grad_u(u));
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        z_ops[k] = spec.discrete_adjoint_z(u, &w);
        costates[k] = v;
        propagated[k] = w;
    }
    Ok(AdjointPath {
        costates,
        propagated,
        z_ops,
        method: AdjointMethod::DiscreteAdjoint,
    })
}

/// Pathwise discrete adjoints for a batch, in batch order.
pub fn solve_discrete_adjoint_batch(
    spec: &ProblemSpec,
    forwards: &[ForwardPath],
    control: &ControlPath,
    batch: &PathBatch,
) -> Result<Vec<AdjointPath>> {
    check_len(batch.len(), forwards.len())?;
    forwards
        .par_iter()
        .zip(batch.paths().par_iter())
        .map(|(f, w)| solve_discrete_adjoint(spec, f, control, w))
        .collect()
}

/// Polynomial features of degree ≤ 2 in the first `n_feat` coefficients:
/// `1, a_i, a_i a_j (i ≤ j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub n_feat: usize,
    /// Ridge weight on the standardized normal equations; `None` solves them
    /// unregularized and fails on rank deficiency.
    pub ridge: Option<f64>,
}

impl RegressionBasis {
    pub const DEFAULT_RIDGE: f64 = 1e-8;

    pub fn new(n_feat: usize) -> Self {
        Self {
            n_feat,
            ridge: Some(Self::DEFAULT_RIDGE),
        }
    }

    pub fn without_ridge(mut self) -> Self {
        self.ridge = None;
        self
    }

    pub fn feature_count(&self) -> usize {
        1 + self.n_feat + self.n_feat * (self.n_feat + 1) / 2
    }

    pub fn features(&self, u: &SpectralField) -> Vec<f64> {
        let a = &u.coeffs()[..self.n_feat.min(u.len())];
        let mut f = Vec::with_capacity(self.feature_count());
        f.push(1.0);
        f.extend_from_slice(a);
        for i in 0..a.len() {
            for j in i..a.len() {
                f.push(a[i] * a[j]);
            }
        }
        f
    }
}

/// Least-squares fit of every column of `y` on the features, evaluated back
/// at the samples. Non-constant columns are standardized and columns without
/// spread are dropped.
fn regress(x: &[Vec<f64>], y: &DMatrix<f64>, ridge: Option<f64>, step: usize) -> Result<DMatrix<f64>> {
    let n = x.len();
    let p = x[0].len();
    let mut keep = Vec::new();
    let mut center = Vec::new();
    let mut scale = Vec::new();
    for j in 1..p {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            keep.push(j);
            center.push(mean);
            scale.push(sd);
        }
    }
    let cols = 1 + keep.len();
    let design = DMatrix::from_fn(n, cols, |i, c| {
        if c == 0 {
            1.0
        } else {
            (x[i][keep[c - 1]] - center[c - 1]) / scale[c - 1]
        }
    });
    let mut gram = design.tr_mul(&design) / n as f64;
    if let Some(lambda) = ridge {
        for c in 1..cols {
            gram[(c, c)] += lambda;
        }
    }
    let rhs = design.tr_mul(y) / n as f64;
    let chol = gram.cholesky().ok_or(Error::RegressionFailure { step })?;
    let l = chol.l();
    let diag_min = l.diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    let diag_max = l.diagonal().iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    if ridge.is_none() && !(diag_min > 1e-7 * diag_max) {
        return Err(Error::RegressionFailure { step });
    }
    let beta = chol.solve(&rhs);
    Ok(design * beta)
}

/// Regression-based costates for every path of `batch`.
pub fn solve_lsmc_adjoint(
    spec: &ProblemSpec,
    forwards: &[ForwardPath],
    control: &ControlPath,
    batch: &PathBatch,
    basis: &RegressionBasis,
) -> Result<Vec<AdjointPath>> {
    control.check_for(spec)?;
    check_len(batch.len(), forwards.len())?;
    if basis.n_feat == 0 || basis.n_feat > spec.n_modes() {
        return Err(Error::invalid(format!(
            "n_feat must lie in 1..={}, got {}",
            spec.n_modes(),
            basis.n_feat
        )));
    }
    let n_paths = forwards.len();
    if n_paths < 10 * basis.feature_count() {
        return Err(Error::invalid(format!(
            "{n_paths} paths are fewer than 10 × {} features",
            basis.feature_count()
        )));
    }
    for (f, w) in forwards.iter().zip(batch.paths()) {
        spec.check_wiener(w)?;
        check_forward(spec, f)?;
        if f.wiener_id != w.id() || f.seed != w.seed() {
            return Err(Error::WienerMismatch("forward paths and batch are not aligned".into()));
        }
    }
    let n = spec.n_modes();
    let m = spec.m_noise();
    let n_steps = spec.n_steps;
    let dt = spec.dt();
    let d_imp = spec.implicit_factors();

    let mut costates: Vec<Vec<SpectralField>> = vec![vec![SpectralField::zeros(n); n_steps + 1]; n_paths];
    let mut propagated: Vec<Vec<SpectralField>> = vec![vec![SpectralField::zeros(n); n_steps]; n_paths];
    let mut z_ops: Vec<Vec<HsOperator>> = vec![vec![HsOperator::zeros(n, m); n_steps]; n_paths];
    for (i, f) in forwards.iter().enumerate() {
        costates[i][n_steps] = spec.terminal_grad(&f.states[n_steps]);
    }

    for k in (0..n_steps).rev() {
        let x: Vec<Vec<f64>> = forwards.par_iter().map(|f| basis.features(&f.states[k])).collect();
        // targets: v_{k+1} (n columns), then v_{k+1,i}·dW_{k,j}/Δt (n·m columns)
        let y = DMatrix::from_fn(n_paths, n + n * m, |p, c| {
            let v = costates[p][k + 1].coeffs();
            if c < n {
                v[c]
            } else {
                let (i, j) = ((c - n) / m, (c - n) % m);
                v[i] * batch.paths()[p].row(k)[j] / dt
            }
        });
        let fitted = regress(&x, &y, basis.ridge, k)?;
        let updates: Vec<(SpectralField, SpectralField, HsOperator)> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let u = &forwards[p].states[k];
                let w = SpectralField::from_vec_unchecked((0..n).map(|i| d_imp[i] * fitted[(p, i)]).collect());
                let z = HsOperator::from_entries(
                    n,
                    m,
                    (0..n * m).map(|c| d_imp[c / m] * fitted[(p, n + c)]).collect(),
                )
                .map_err(|_| Error::NonFinite)?;
                let mut v = w.clone();
                v.axpy(dt, &spec.drift_vjp_unchecked(u, &w));
                v.axpy(dt, &spec.noise_vjp(u, &z)?);
                v.axpy(dt, &spec.running_grad_u(u));
                if !v.is_finite() {
                    return Err(Error::NonFinite);
                }
                Ok((v, w, z))
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, (v, w, z)) in updates.into_iter().enumerate() {
            costates[p][k] = v;
            propagated[p][k] = w;
            z_ops[p][k] = z;
        }
    }

    Ok(costates
        .into_iter()
        .zip(propagated)
        .zip(z_ops)
        .map(|((costates, propagated), z_ops)| AdjointPath {
            costates,
            propagated,
            z_ops,
            method: AdjointMethod::Lsmc,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    /// `E⟨v_N, P_N⟩`
    pub lhs: f64,
    /// `−E Σ_k Δt⟨ℒ_u(u_k), P_k⟩ + E Σ_k Δt⟨w_k, GΦ̃_k⟩`
    pub rhs: f64,
    /// `|lhs − rhs| / (1 + |lhs| + |rhs|)`
    pub residual: f64,
    /// Largest residual of the same identity on a single path.
    pub max_path_residual: f64,
    pub method: AdjointMethod,
    pub n_paths: usize,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs() + b.abs())
}

/// Duality between the linearized and adjoint equations, batch-averaged and
/// per path.
pub fn duality_residual(
    spec: &ProblemSpec,
    sens: &[SensitivityPath],
    adj: &[AdjointPath],
    forwards: &[ForwardPath],
    direction: &ControlPath,
) -> Result<DualityReport> {
    direction.check_for(spec)?;
    let n_paths = adj.len();
    if n_paths == 0 {
        return Err(Error::invalid("duality needs at least one path"));
    }
    check_len(n_paths, sens.len())?;
    check_len(n_paths, forwards.len())?;
    let n_steps = spec.n_steps;
    let dt = spec.dt();
    let mut lhs_sum = 0.0;
    let mut rhs_sum = 0.0;
    let mut max_path = 0.0_f64;
    for ((p, a), f) in sens.iter().zip(adj).zip(forwards) {
        check_len(n_steps + 1, p.states.len())?;
        check_len(n_steps + 1, a.costates.len())?;
        check_len(n_steps, a.propagated.len())?;
        check_forward(spec, f)?;
        let lhs = a.costates[n_steps].dot(&p.states[n_steps]);
        let mut running = 0.0;
        let mut control = 0.0;
        for k in 0..n_steps {
            running += spec.running_grad_u(&f.states[k]).dot(&p.states[k]);
            control += a.propagated[k].dot(&spec.gain_apply(direction.step(k)));
        }
        let rhs = dt * (control - running);
        max_path = max_path.max(relative_gap(lhs, rhs));
        lhs_sum += lhs;
        rhs_sum += rhs;
    }
    let lhs = lhs_sum / n_paths as f64;
    let rhs = rhs_sum / n_paths as f64;
    Ok(DualityReport {
        lhs,
        rhs,
        residual: relative_gap(lhs, rhs),
        max_path_residual: max_path,
        method: adj[0].method,
        n_paths,
    })
}

/// `sup_k E‖v_k‖² + Σ_k Δt·E‖v_k‖_V² + Σ_k Δt·E‖Z_k‖₂²` over the batch.
pub fn stability_constant(spec: &ProblemSpec, adj: &[AdjointPath]) -> f64 {
    let n_paths = adj.len() as f64;
    let n_steps = spec.n_steps;
    let dt = spec.dt();
    let sup = (0..=n_steps)
        .map(|k| adj.iter().map(|a| a.costates[k].norm_sq()).sum::<f64>() / n_paths)
        .fold(0.0, f64::max);
    let v_int: f64 = adj
        .iter()
        .map(|a| (0..n_steps).map(|k| spec.space.v_norm_sq(&a.costates[k])).sum::<f64>())
        .sum::<f64>()
        * dt
        / n_paths;
    let z_int: f64 = adj
        .iter()
        .map(|a| a.z_ops.iter().map(|z| hs_norm(z).powi(2)).sum::<f64>())
        .sum::<f64>()
        * dt
        / n_paths;
    sup + v_int + z_int
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_batch, simulate_path};
    use crate::models::{BuiltinModel, CostModel, NoiseModel};
    use crate::sensitivity::simulate_linearized;

    #[test]
    fn zero_cost_gives_zero_adjoint() {
        let s = ProblemSpec::builtin(BuiltinModel::Cubic, 4, 20).unwrap();
        let s = s.with_cost(CostModel::quadratic(4, 0.0, 1.0, 0.0)).unwrap();
        let w = WienerPath::generate(1, 0, 20, 4, s.dt()).unwrap();
        let c = ControlPath::zeros_for(&s);
        let f = simulate_path(&s, &s.u0, &c, &w).unwrap();
        let a = solve_discrete_adjoint(&s, &f, &c, &w).unwrap();
        assert!(a.costates.iter().all(|v| v.coeffs().iter().all(|x| *x == 0.0)));
        assert!(a.z_ops.iter().all(|z| hs_norm(z) == 0.0));
    }

    #[test]
    fn three_step_scalar_recursion() {
        let s = ProblemSpec::builtin(BuiltinModel::Linear, 1, 3)
            .unwrap()
            .with_noise(NoiseModel::zero(1, 1))
            .unwrap()
            .with_cost(CostModel::quadratic(1, 0.0, 1.0, 1.0))
            .unwrap();
        let w = WienerPath::zeros(3, 1, s.dt()).unwrap();
        let c = ControlPath::zeros_for(&s);
        let f = simulate_path(&s, &s.u0, &c, &w).unwrap();
        let a = solve_discrete_adjoint(&s, &f, &c, &w).unwrap();
        let d = 1.0 / (1.0 + s.dt() * std::f64::consts::PI.powi(2));
        let u_n = f.states[3].coeffs()[0];
        assert!((u_n - d.powi(3)).abs() < 1e-15);
        for k in 0..=3 {
            let expected = d.powi(3 - k as i32) * u_n;
            assert!((a.costates[k].coeffs()[0] - expected).abs() < 1e-15 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn adjoint_is_linear_in_cost_gradients() {
        let s = ProblemSpec::builtin(BuiltinModel::Burgers, 4, 30).unwrap();
        let w = WienerPath::generate(2, 0, 30, 4, s.dt()).unwrap();
        let c = ControlPath::constant(30, &[0.5, -0.5]).unwrap();
        let f = simulate_path(&s, &s.u0, &c, &w).unwrap();
        let a = solve_discrete_adjoint(&s, &f, &c, &w).unwrap();
        let mut cost = s.cost.clone();
        cost.q *= 2.0;
        cost.g *= 2.0;
        let s2 = s.clone().with_cost(cost).unwrap();
        let a2 = solve_discrete_adjoint(&s2, &f, &c, &w).unwrap();
        for (x, y) in a.costates.iter().zip(&a2.costates) {
            assert_eq!(x.scaled(2.0), *y);
        }
    }

    #[test]
    fn pathwise_duality_is_exact() {
        for model in BuiltinModel::ALL {
            let s = ProblemSpec::builtin(model, 6, 40).unwrap();
            let w = WienerPath::generate(5, 3, 40, 6, s.dt()).unwrap();
            let c = ControlPath::constant(40, &[0.4, -0.3]).unwrap();
            let dir = ControlPath::new((0..40).map(|k| vec![(k as f64 * 0.3).sin(), 1.0]).collect()).unwrap();
            let f = simulate_path(&s, &s.u0, &c, &w).unwrap();
            let p = simulate_linearized(&s, &f, &dir, &w).unwrap();
            let a = solve_discrete_adjoint(&s, &f, &c, &w).unwrap();
            let r = duality_residual(&s, &[p], &[a], &[f], &dir).unwrap();
            assert!(r.residual < 1e-12, "{model:?}: {r:?}");
        }
    }

    #[test]
    fn features_and_failures() {
        let b = RegressionBasis::new(3);
        assert_eq!(b.feature_count(), 10);
        let u = SpectralField::from_coeffs(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b.features(&u), vec![1.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);

        // exactly collinear features: a₂ = 2a₁ on every path
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
        let y = DMatrix::from_fn(50, 1, |i, _| i as f64);
        assert!(matches!(regress(&x, &y, None, 7), Err(Error::RegressionFailure { step: 7 })));
        let fit = regress(&x, &y, Some(1e-8), 7).unwrap();
        assert!((fit[(10, 0)] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn lsmc_matches_discrete_adjoint_without_noise() {
        let s = ProblemSpec::builtin(BuiltinModel::Cubic, 4, 20).unwrap();
        let s = s.with_noise(NoiseModel::zero(4, 4)).unwrap();
        let batch = PathBatch::for_spec(&s, 1, 200).unwrap();
        let c = ControlPath::constant(20, &[0.3, 0.1]).unwrap();
        let fw = simulate_batch(&s, &s.u0, &c, &batch).unwrap();
        let lsmc = solve_lsmc_adjoint(&s, &fw, &c, &batch, &RegressionBasis::new(4)).unwrap();
        let da = solve_discrete_adjoint(&s, &fw[0], &c, &batch.paths()[0]).unwrap();
        for (a, b) in lsmc[0].costates.iter().zip(&da.costates) {
            let err = a.sub(b).norm_sq().sqrt() / b.norm_sq().sqrt();
            assert!(err < 1e-3, "{err}");
        }
        assert!(solve_lsmc_adjoint(&s, &fw[..50], &c, &batch, &RegressionBasis::new(4)).is_err());
    }
}
