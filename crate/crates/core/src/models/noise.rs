use serde::{Deserialize, Serialize};

use super::ProblemSpec;
use crate::error::{check_len, Error, Result};
use crate::spectral::{HsOperator, SpectralField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `Ξ(u)_kk = σ_k`
    Additive,
    /// `Ξ(u)_kk = σ_k·s·tanh(a_k/s)`, bounded in `u` so `γ < ∞`.
    BoundedMultiplicative,
}

/// Diagonal noise coefficient `Ξ(u) ∈ L₂(U_m; H_n)`; mode `k` is driven by
/// noise coordinate `k` for `k < min(n, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: Vec<f64>,
    pub saturation: f64,
    pub m_noise: usize,
    pub k6: f64,
}

impl NoiseModel {
    pub(crate) fn validate(&self, n: usize) -> Result<()> {
        check_len(n, self.sigma.len())?;
        if self.m_noise == 0 {
            return Err(Error::invalid("m_noise must be positive"));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        if !(self.saturation > 0.0 && self.saturation.is_finite()) {
            return Err(Error::invalid("saturation must be positive"));
        }
        if !(self.k6 >= 0.0) {
            return Err(Error::invalid("k6 must be non-negative"));
        }
        Ok(())
    }

    pub fn zero(n: usize, m_noise: usize) -> Self {
        Self {
            kind: NoiseKind::Additive,
            sigma: vec![0.0; n],
            saturation: 1.0,
            m_noise,
            k6: 0.0,
        }
    }

    fn active(&self) -> usize {
        self.sigma.len().min(self.m_noise)
    }

    /// `γ = sup_u ‖Ξ(u)‖₂²`.
    pub fn gamma(&self) -> f64 {
        let s2 = match self.kind {
            NoiseKind::Additive => 1.0,
            NoiseKind::BoundedMultiplicative => self.saturation * self.saturation,
        };
        self.sigma[..self.active()].iter().map(|s| s * s * s2).sum()
    }

    /// Diagonal of `Ξ(u)`.
    pub(crate) fn diag(&self, u: &SpectralField) -> Vec<f64> {
        let a = u.coeffs();
        let s = self.saturation;
        (0..self.active())
            .map(|k| match self.kind {
                NoiseKind::Additive => self.sigma[k],
                NoiseKind::BoundedMultiplicative => self.sigma[k] * s * (a[k] / s).tanh(),
            })
            .collect()
    }

    /// Diagonal of `∂Ξ_kk/∂a_k`.
    pub(crate) fn deriv_diag(&self, u: &SpectralField) -> Vec<f64> {
        let a = u.coeffs();
        (0..self.active())
            .map(|k| match self.kind {
                NoiseKind::Additive => 0.0,
                NoiseKind::BoundedMultiplicative => {
                    self.sigma[k] / (a[k] / self.saturation).cosh().powi(2)
                }
            })
            .collect()
    }

    fn diag_operator(&self, n: usize, diag: &[f64]) -> HsOperator {
        let mut m = HsOperator::zeros(n, self.m_noise);
        for (k, d) in diag.iter().enumerate() {
            m.set(k, k, *d);
        }
        m
    }
}

impl ProblemSpec {
    pub fn noise_eval(&self, u: &SpectralField) -> Result<HsOperator> {
        check_len(self.n_modes(), u.len())?;
        Ok(self.noise.diag_operator(self.n_modes(), &self.noise.diag(u)))
    }

    /// `Ξ'(u)(p)`.
    pub fn noise_jvp(&self, u: &SpectralField, p: &SpectralField) -> Result<HsOperator> {
        check_len(self.n_modes(), u.len())?;
        check_len(self.n_modes(), p.len())?;
        let diag: Vec<f64> = self
            .noise
            .deriv_diag(u)
            .iter()
            .zip(p.coeffs())
            .map(|(d, pk)| d * pk)
            .collect();
        Ok(self.noise.diag_operator(self.n_modes(), &diag))
    }

    /// `∇_u⟨Ξ(u), Z⟩₂`, the adjoint of `p ↦ Ξ'(u)(p)` applied to `Z`.
    pub fn noise_vjp(&self, u: &SpectralField, z: &HsOperator) -> Result<SpectralField> {
        check_len(self.n_modes(), u.len())?;
        check_len(self.n_modes(), z.rows())?;
        check_len(self.m_noise(), z.cols())?;
        let mut out = SpectralField::zeros(self.n_modes());
        for (k, d) in self.noise.deriv_diag(u).iter().enumerate() {
            out.coeffs_mut()[k] = d * z.get(k, k);
        }
        Ok(out)
    }

    /// `Ξ(u)·dW`
    pub(crate) fn noise_apply(&self, u: &SpectralField, dw: &[f64]) -> SpectralField {
        let mut out = SpectralField::zeros(self.n_modes());
        for (k, d) in self.noise.diag(u).iter().enumerate() {
            out.coeffs_mut()[k] = d * dw[k];
        }
        out
    }

    /// `(Ξ'(u)p)·dW`
    pub(crate) fn noise_jvp_apply(
        &self,
        u: &SpectralField,
        p: &SpectralField,
        dw: &[f64],
    ) -> SpectralField {
        let mut out = SpectralField::zeros(self.n_modes());
        for (k, d) in self.noise.deriv_diag(u).iter().enumerate() {
            out.coeffs_mut()[k] = d * p.coeffs()[k] * dw[k];
        }
        out
    }

    /// Adjoint of `p ↦ (Ξ'(u)p)·dW` applied to `w`; equals
    /// `noise_vjp(u, w ⊗ dW)`.
    pub fn noise_vjp_directional(
        &self,
        u: &SpectralField,
        w: &SpectralField,
        dw: &[f64],
    ) -> SpectralField {
        let mut out = SpectralField::zeros(self.n_modes());
        for (k, d) in self.noise.deriv_diag(u).iter().enumerate() {
            out.coeffs_mut()[k] = d * w.coeffs()[k] * dw[k];
        }
        out
    }

    /// Second adjoint component reported by the discrete adjoint: the
    /// costate `w` weighted by the noise sensitivity for the multiplicative
    /// kind, and by the noise amplitude for the additive kind.
    pub(crate) fn discrete_adjoint_z(&self, u: &SpectralField, w: &SpectralField) -> HsOperator {
        let weights = match self.noise.kind {
            NoiseKind::Additive => self.noise.diag(u),
            NoiseKind::BoundedMultiplicative => self.noise.deriv_diag(u),
        };
        let diag: Vec<f64> = weights
            .iter()
            .zip(w.coeffs())
            .map(|(a, b)| a * b)
            .collect();
        self.noise.diag_operator(self.n_modes(), &diag)
    }
}
