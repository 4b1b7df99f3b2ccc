use serde::Serialize;

use super::ProblemSpec;
use crate::error::{check_len, Error, Result};
use crate::spectral::SpectralField;

/// `ℒ(u,Φ) = (q/2)‖u − u_ref‖² + (r/2)‖Φ‖²`, `𝒦(u) = (g/2)‖u − u_T‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub u_ref: SpectralField,
    pub u_t: SpectralField,
    pub c_l: f64,
    pub c_k: f64,
    pub k_l: f64,
    pub k_k: f64,
}

impl CostModel {
    pub(crate) fn validate(&self, n: usize) -> Result<()> {
        check_len(n, self.u_ref.len())?;
        check_len(n, self.u_t.len())?;
        if !(self.q >= 0.0 && self.g >= 0.0) {
            return Err(Error::invalid("q and g must be non-negative"));
        }
        if !(self.r > 0.0) {
            return Err(Error::invalid("r must be positive"));
        }
        Ok(())
    }

    /// Quadratic cost with zero references.
    pub fn quadratic(n: usize, q: f64, r: f64, g: f64) -> Self {
        Self {
            q,
            r,
            g,
            u_ref: SpectralField::zeros(n),
            u_t: SpectralField::zeros(n),
            c_l: q.max(r),
            c_k: g,
            k_l: q.max(r),
            k_k: g,
        }
    }

    /// `ℒ_u(0,Φ) = 0` and `‖𝒦'(u)‖ ≤ k_𝒦‖u‖` need zero references.
    pub fn has_tracking_references(&self) -> bool {
        self.u_ref.coeffs().iter().any(|c| *c != 0.0) || self.u_t.coeffs().iter().any(|c| *c != 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunningCost {
    pub value: f64,
    pub grad_u: SpectralField,
    pub grad_phi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TerminalCost {
    pub value: f64,
    pub grad: SpectralField,
}

impl ProblemSpec {
    pub(crate) fn running_value(&self, u: &SpectralField, phi: &[f64]) -> f64 {
        let c = &self.cost;
        let du = u.sub(&c.u_ref);
        0.5 * c.q * du.norm_sq() + 0.5 * c.r * phi.iter().map(|p| p * p).sum::<f64>()
    }

    pub(crate) fn running_grad_u(&self, u: &SpectralField) -> SpectralField {
        u.sub(&self.cost.u_ref).scaled(self.cost.q)
    }

    pub(crate) fn terminal_value(&self, u: &SpectralField) -> f64 {
        0.5 * self.cost.g * u.sub(&self.cost.u_t).norm_sq()
    }

    pub(crate) fn terminal_grad(&self, u: &SpectralField) -> SpectralField {
        u.sub(&self.cost.u_t).scaled(self.cost.g)
    }

    pub fn cost_running(&self, u: &SpectralField, phi: &[f64]) -> Result<RunningCost> {
        check_len(self.n_modes(), u.len())?;
        check_len(self.d_control(), phi.len())?;
        Ok(RunningCost {
            value: self.running_value(u, phi),
            grad_u: self.running_grad_u(u),
            grad_phi: phi.iter().map(|p| self.cost.r * p).collect(),
        })
    }

    pub fn cost_terminal(&self, u: &SpectralField) -> Result<TerminalCost> {
        check_len(self.n_modes(), u.len())?;
        Ok(TerminalCost {
            value: self.terminal_value(u),
            grad: self.terminal_grad(u),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BuiltinModel;
    use rand::{Rng, SeedableRng};

    fn spec_with(cost: CostModel) -> ProblemSpec {
        ProblemSpec::builtin(BuiltinModel::Linear, 3, 10)
            .unwrap()
            .with_controls(crate::models::ControlSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap())
            .unwrap()
            .with_cost(cost)
            .unwrap()
    }

    #[test]
    fn running_cost_examples() {
        let s = spec_with(CostModel::quadratic(3, 1.0, 1.0, 0.0));
        let e1 = SpectralField::unit(3, 1);
        let c = s.cost_running(&e1, &[0.5, 0.0]).unwrap();
        assert!((c.value - 0.625).abs() < 1e-15);
        assert_eq!(c.grad_u, e1);
        assert_eq!(c.grad_phi, vec![0.5, 0.0]);

        let mut tracking = CostModel::quadratic(3, 2.0, 1.0, 1.0);
        tracking.u_ref = SpectralField::from_coeffs(vec![0.3, -0.1, 0.2]).unwrap();
        let s = spec_with(tracking.clone());
        let at_ref = s.cost_running(&tracking.u_ref, &[0.0, 0.0]).unwrap();
        assert_eq!(at_ref.value, 0.0);
        assert!(at_ref.grad_u.coeffs().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn terminal_cost_examples() {
        let s = spec_with(CostModel::quadratic(3, 0.0, 1.0, 2.0));
        let e1 = SpectralField::unit(3, 1);
        let t = s.cost_terminal(&e1).unwrap();
        assert_eq!(t.value, 1.0);
        assert_eq!(t.grad.coeffs(), &[2.0, 0.0, 0.0]);
        let zero = s.cost_terminal(&SpectralField::zeros(3)).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut cost = CostModel::quadratic(3, 1.7, 0.4, 2.3);
        cost.u_ref = SpectralField::from_coeffs(vec![0.1, 0.2, -0.3]).unwrap();
        cost.u_t = SpectralField::from_coeffs(vec![-0.5, 0.0, 0.4]).unwrap();
        let s = spec_with(cost);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..20 {
            let u = SpectralField::from_coeffs((0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let phi = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let rc = s.cost_running(&u, &phi).unwrap();
            let tc = s.cost_terminal(&u).unwrap();
            for k in 0..3 {
                let mut up = u.clone();
                up.coeffs_mut()[k] += h;
                let mut um = u.clone();
                um.coeffs_mut()[k] -= h;
                let fd = (s.running_value(&up, &phi) - s.running_value(&um, &phi)) / (2.0 * h);
                assert!((fd - rc.grad_u.coeffs()[k]).abs() <= 1e-7 * rc.grad_u.coeffs()[k].abs().max(1.0));
                let fd = (s.terminal_value(&up) - s.terminal_value(&um)) / (2.0 * h);
                assert!((fd - tc.grad.coeffs()[k]).abs() <= 1e-7 * tc.grad.coeffs()[k].abs().max(1.0));
            }
        }
    }
}
