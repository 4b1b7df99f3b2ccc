//! Numeric spot-checks of the structural hypotheses on a concrete problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ProblemSpec;
use crate::error::{Error, Result};
use crate::spectral::{hs_norm, SpectralField};

const MAX_WITNESSES: usize = 16;

/// A sampled point at which a checked inequality failed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub check: String,
    /// `rhs − lhs` divided by `‖v₁ − v₂‖²`; negative means violated.
    pub margin: f64,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub n_samples: usize,
    pub radius: f64,
    pub seed: u64,
    /// Smallest `[(K+ρ(v₂))‖d‖² − 2⟨B(v₁)−B(v₂),d⟩ − ‖Ξ(v₁)−Ξ(v₂)‖₂²]/‖d‖²`.
    pub a2_worst_margin: f64,
    pub a2_violation_count: usize,
    pub a2_violations: Vec<Violation>,
    /// `min_k (−2·diag_k − θλ_k)`, exact.
    pub a3_coercivity_margin: f64,
    /// Smallest `K‖v‖² + f₀ − 2⟨B(v,Φ),v⟩ − ‖Ξ(v)‖₂²`; informational.
    pub a3_drift_worst_margin: f64,
    /// Largest sampled `|ℒ(u₁,Φ₁)−ℒ(u₂,Φ₂)| / (‖u₁−u₂‖² + ‖Φ₁−Φ₂‖²)`.
    pub h1_running_ratio: f64,
    pub h1_terminal_ratio: f64,
    pub h2_tracking_references: bool,
    /// Largest sampled `ρ₁(v)/‖v‖`; at most 1 when `ρ₁(u) ≤ ‖u‖` holds.
    pub rho1_max_ratio: f64,
    pub k: f64,
    pub theta: f64,
    pub gamma: f64,
    pub c_hv: f64,
    /// `(K − 2θ)² − 48γc_HV²`
    pub lemma2_value: f64,
    pub lemma2_satisfied: bool,
    pub warnings: Vec<String>,
}

impl AssumptionReport {
    /// A2 without violations, A3 coercivity, and `ρ₁(u) ≤ ‖u‖`.
    pub fn passed(&self) -> bool {
        self.a2_violation_count == 0
            && self.a3_coercivity_margin >= 0.0
            && self.rho1_max_ratio <= 1.0
    }
}

fn sample_field(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> SpectralField {
    let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = radius * rng.random::<f64>();
    let scale = if norm > 0.0 { r / norm } else { 0.0 };
    SpectralField::from_vec_unchecked(dir.into_iter().map(|x| x * scale).collect())
}

fn sample_control(rng: &mut ChaCha8Rng, spec: &ProblemSpec) -> Vec<f64> {
    spec.controls
        .lower
        .iter()
        .zip(&spec.controls.upper)
        .map(|(l, u)| if l < u { rng.random_range(*l..=*u) } else { *l })
        .collect()
}

/// Samples `n_samples` triples `(v₁, v₂, Φ)` with `‖v_i‖ ≤ radius` and
/// evaluates each hypothesis; violations are collected, never raised.
pub fn check_assumptions(
    spec: &ProblemSpec,
    n_samples: usize,
    radius: f64,
    seed: u64,
) -> Result<AssumptionReport> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid("radius must be positive"));
    }
    let n = spec.n_modes();
    let k = spec.drift.constants.k;
    let f0 = spec.drift.f0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut a2_worst = f64::INFINITY;
    let mut a2_count = 0;
    let mut a2_violations = Vec::new();
    let mut a3_worst = f64::INFINITY;
    let mut h1_run = 0.0_f64;
    let mut h1_term = 0.0_f64;
    let mut rho1_ratio = 0.0_f64;

    for _ in 0..n_samples {
        let v1 = sample_field(&mut rng, n, radius);
        let v2 = sample_field(&mut rng, n, radius);
        let phi = sample_control(&mut rng, spec);
        let phi2 = sample_control(&mut rng, spec);
        let d = v1.sub(&v2);
        let d_sq = d.norm_sq();

        if d_sq > 0.0 {
            let db = spec.drift_eval(&v1, &phi)?.sub(&spec.drift_eval(&v2, &phi)?);
            let (x1, x2) = (spec.noise.diag(&v1), spec.noise.diag(&v2));
            let dxi: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum();
            let lhs = 2.0 * db.dot(&d) + dxi;
            let rhs = (k + spec.rho(&v2)) * d_sq;
            let margin = (rhs - lhs) / d_sq;
            a2_worst = a2_worst.min(margin);
            let slack = 1e-12 * (lhs.abs() + rhs.abs());
            if rhs - lhs < -slack {
                a2_count += 1;
                if a2_violations.len() < MAX_WITNESSES {
                    a2_violations.push(Violation {
                        check: "local-monotonicity".into(),
                        margin,
                        v1: v1.coeffs().to_vec(),
                        v2: v2.coeffs().to_vec(),
                        phi: phi.clone(),
                    });
                }
            }
        }

        let b = spec.drift_eval(&v1, &phi)?;
        let xi_sq = hs_norm(&spec.noise_eval(&v1)?).powi(2);
        a3_worst = a3_worst.min(k * v1.norm_sq() + f0 - 2.0 * b.dot(&v1) - xi_sq);

        let dist = d_sq + phi.iter().zip(&phi2).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        if dist > 0.0 {
            let dl = (spec.running_value(&v1, &phi) - spec.running_value(&v2, &phi2)).abs();
            h1_run = h1_run.max(dl / dist);
        }
        if d_sq > 0.0 {
            let dk = (spec.terminal_value(&v1) - spec.terminal_value(&v2)).abs();
            h1_term = h1_term.max(dk / d_sq);
        }
        let h = v1.norm_sq().sqrt();
        if h > 0.0 {
            rho1_ratio = rho1_ratio.max(spec.rho1(&v1) / h);
        }
    }

    let theta = spec.a_op.theta;
    let gamma = spec.noise.gamma();
    let c_hv = spec.space.c_hv();
    let lemma2_value = (k - 2.0 * theta).powi(2) - 48.0 * gamma * c_hv * c_hv;

    let mut warnings = Vec::new();
    if h1_run > spec.cost.c_l {
        warnings.push(format!(
            "running cost difference ratio {h1_run:.3e} exceeds C_L = {:.3e}; a quadratic cost is only locally Lipschitz",
            spec.cost.c_l
        ));
    }
    if h1_term > spec.cost.c_k {
        warnings.push(format!(
            "terminal cost difference ratio {h1_term:.3e} exceeds C_K = {:.3e}",
            spec.cost.c_k
        ));
    }
    let tracking = spec.cost.has_tracking_references();
    if tracking {
        warnings.push("nonzero u_ref or u_t: L_u(0, .) = 0 and the linear gradient bounds do not hold".into());
    }
    if a3_worst < 0.0 {
        warnings.push(format!(
            "coercivity drift bound K|v|^2 + f0 fails on samples (worst margin {a3_worst:.3e})"
        ));
    }

    Ok(AssumptionReport {
        n_samples,
        radius,
        seed,
        a2_worst_margin: a2_worst,
        a2_violation_count: a2_count,
        a2_violations,
        a3_coercivity_margin: spec.a_op.coercivity_margin(&spec.space),
        a3_drift_worst_margin: a3_worst,
        h1_running_ratio: h1_run,
        h1_terminal_ratio: h1_term,
        h2_tracking_references: tracking,
        rho1_max_ratio: rho1_ratio,
        k,
        theta,
        gamma,
        c_hv,
        lemma2_value,
        lemma2_satisfied: lemma2_value > 0.0,
        warnings,
    })
}
