use serde::{Deserialize, Serialize};

use super::ProblemSpec;
use crate::error::{check_len, Error, Result};
use crate::spectral::SpectralField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    /// `F ≡ 0`
    LinearControl,
    /// `F(u) = −c₃ Π_n(u³)`
    CubicReaction,
    /// `F(u) = −Π_n(u ∂ₓu)`
    BurgersConvection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    pub k: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
}

/// `B(u, Φ) = F(u) + GΦ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftModel {
    pub kind: DriftKind,
    pub c3: f64,
    /// Row-major `n_modes × d_control` gain.
    pub gain: Vec<f64>,
    pub d_control: usize,
    pub constants: DriftConstants,
    /// Coefficient of the local-monotonicity weight `ρ`.
    pub rho_coeff: f64,
    /// `ρ₁(u) = rho1_coeff·‖u‖`, with `rho1_coeff ≤ 1`.
    pub rho1_coeff: f64,
    /// Constant `f(t) ≡ f₀` in the coercivity and growth bounds.
    pub f0: f64,
}

impl DriftModel {
    pub(crate) fn validate(&self, n: usize, d: usize) -> Result<()> {
        check_len(d, self.d_control)?;
        check_len(n * d, self.gain.len())?;
        if self.gain.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite);
        }
        if !(self.c3 >= 0.0) {
            return Err(Error::invalid("c3 must be non-negative"));
        }
        let c = &self.constants;
        if [c.k, c.k2, c.k3, c.k4, c.k5, self.rho_coeff, self.f0]
            .iter()
            .any(|x| !(*x >= 0.0))
        {
            return Err(Error::invalid("drift constants must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.rho1_coeff) {
            return Err(Error::invalid("rho1_coeff must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn gain_entry(&self, mode: usize, control: usize) -> f64 {
        self.gain[mode * self.d_control + control]
    }
}

impl ProblemSpec {
    /// State-dependent part `F(u)`.
    pub(crate) fn drift_state(&self, u: &SpectralField) -> SpectralField {
        let space = &self.space;
        match self.drift.kind {
            DriftKind::LinearControl => SpectralField::zeros(u.len()),
            DriftKind::CubicReaction => {
                let c3 = self.drift.c3;
                let grid: Vec<f64> = space.to_grid(u).iter().map(|x| -c3 * x * x * x).collect();
                space.from_grid(&grid)
            }
            DriftKind::BurgersConvection => {
                let (ug, uxg) = (space.to_grid(u), space.dx_to_grid(u));
                let grid: Vec<f64> = ug.iter().zip(&uxg).map(|(a, b)| -a * b).collect();
                space.from_grid(&grid)
            }
        }
    }

    /// `GΦ`
    pub(crate) fn gain_apply(&self, phi: &[f64]) -> SpectralField {
        let d = self.drift.d_control;
        SpectralField::from_vec_unchecked(
            self.drift
                .gain
                .chunks(d)
                .map(|row| row.iter().zip(phi).map(|(g, p)| g * p).sum())
                .collect(),
        )
    }

    /// `Gᵀv`
    pub(crate) fn gain_transpose(&self, v: &SpectralField) -> Vec<f64> {
        let d = self.drift.d_control;
        let mut out = vec![0.0; d];
        for (row, vk) in self.drift.gain.chunks(d).zip(v.coeffs()) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += g * vk;
            }
        }
        out
    }

    fn check_state(&self, u: &SpectralField) -> Result<()> {
        check_len(self.n_modes(), u.len())
    }

    fn check_control(&self, phi: &[f64]) -> Result<()> {
        check_len(self.d_control(), phi.len())
    }

    /// `B(u, Φ)` projected onto `H_n`.
    pub fn drift_eval(&self, u: &SpectralField, phi: &[f64]) -> Result<SpectralField> {
        self.check_state(u)?;
        self.check_control(phi)?;
        let mut b = self.drift_state(u);
        b.axpy(1.0, &self.gain_apply(phi));
        if b.is_finite() {
            Ok(b)
        } else {
            Err(Error::NonFinite)
        }
    }

    pub(crate) fn drift_jvp_unchecked(&self, u: &SpectralField, p: &SpectralField) -> SpectralField {
        let space = &self.space;
        match self.drift.kind {
            DriftKind::LinearControl => SpectralField::zeros(u.len()),
            DriftKind::CubicReaction => {
                let c = -3.0 * self.drift.c3;
                let (ug, pg) = (space.to_grid(u), space.to_grid(p));
                let grid: Vec<f64> = ug.iter().zip(&pg).map(|(a, b)| c * a * a * b).collect();
                space.from_grid(&grid)
            }
            DriftKind::BurgersConvection => {
                let (ug, uxg) = (space.to_grid(u), space.dx_to_grid(u));
                let (pg, pxg) = (space.to_grid(p), space.dx_to_grid(p));
                let grid: Vec<f64> = (0..ug.len())
                    .map(|g| -(pg[g] * uxg[g] + ug[g] * pxg[g]))
                    .collect();
                space.from_grid(&grid)
            }
        }
    }

    pub(crate) fn drift_vjp_unchecked(&self, u: &SpectralField, v: &SpectralField) -> SpectralField {
        let space = &self.space;
        match self.drift.kind {
            DriftKind::LinearControl => SpectralField::zeros(u.len()),
            // multiplication by −3c₃u² is self-adjoint
            DriftKind::CubicReaction => self.drift_jvp_unchecked(u, v),
            // ∫(p uₓ + u pₓ) v = −∫ p u vₓ after integrating by parts
            DriftKind::BurgersConvection => {
                let (ug, vxg) = (space.to_grid(u), space.dx_to_grid(v));
                let grid: Vec<f64> = ug.iter().zip(&vxg).map(|(a, b)| a * b).collect();
                space.from_grid(&grid)
            }
        }
    }

    /// Directional derivative `B_u(u, Φ)p`.
    pub fn drift_jvp(
        &self,
        u: &SpectralField,
        phi: &[f64],
        p: &SpectralField,
    ) -> Result<SpectralField> {
        self.check_state(u)?;
        self.check_state(p)?;
        self.check_control(phi)?;
        Ok(self.drift_jvp_unchecked(u, p))
    }

    /// Adjoint action `B_u(u, Φ)*v`, i.e. `∇_u⟨B(u,Φ), v⟩`.
    pub fn drift_vjp(
        &self,
        u: &SpectralField,
        phi: &[f64],
        v: &SpectralField,
    ) -> Result<SpectralField> {
        self.check_state(u)?;
        self.check_state(v)?;
        self.check_control(phi)?;
        Ok(self.drift_vjp_unchecked(u, v))
    }

    /// `B_Φ(u, Φ)dΦ = G·dΦ`.
    pub fn drift_control_jvp(
        &self,
        u: &SpectralField,
        phi: &[f64],
        dphi: &[f64],
    ) -> Result<SpectralField> {
        self.check_state(u)?;
        self.check_control(phi)?;
        self.check_control(dphi)?;
        Ok(self.gain_apply(dphi))
    }

    /// `B_Φ(u, Φ)*v = Gᵀv`.
    pub fn drift_control_vjp(
        &self,
        u: &SpectralField,
        phi: &[f64],
        v: &SpectralField,
    ) -> Result<Vec<f64>> {
        self.check_state(u)?;
        self.check_state(v)?;
        self.check_control(phi)?;
        Ok(self.gain_transpose(v))
    }

    /// Local-monotonicity weight `ρ(v)`.
    pub fn rho(&self, v: &SpectralField) -> f64 {
        let c = self.drift.rho_coeff;
        match self.drift.kind {
            DriftKind::LinearControl => 0.0,
            DriftKind::CubicReaction => c * v.norm_sq().powi(2),
            DriftKind::BurgersConvection => c * self.space.v_norm_sq(v),
        }
    }

    pub fn rho1(&self, v: &SpectralField) -> f64 {
        self.drift.rho1_coeff * v.norm_sq().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BuiltinModel, NoiseKind};
    use crate::spectral::inner_h;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{PI, SQRT_2};

    /// Composite Simpson quadrature of `f·w_k` over (0,1), independent of the
    /// pseudo-spectral grid.
    fn quad_coeff(f: impl Fn(f64) -> f64, k: usize) -> f64 {
        let m = 20_000;
        let h = 1.0 / m as f64;
        let g = |x: f64| f(x) * SQRT_2 * (k as f64 * PI * x).sin();
        let mut s = g(0.0) + g(1.0);
        for i in 1..m {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
        }
        s * h / 3.0
    }

    fn field_fn(a: &SpectralField) -> impl Fn(f64) -> f64 + '_ {
        move |x| {
            a.coeffs()
                .iter()
                .enumerate()
                .map(|(k, c)| c * SQRT_2 * ((k + 1) as f64 * PI * x).sin())
                .sum()
        }
    }

    fn field_dx_fn(a: &SpectralField) -> impl Fn(f64) -> f64 + '_ {
        move |x| {
            a.coeffs()
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let f = (k + 1) as f64 * PI;
                    c * SQRT_2 * f * (f * x).cos()
                })
                .sum()
        }
    }

    fn random_field(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> SpectralField {
        SpectralField::from_coeffs((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn spec(model: BuiltinModel) -> ProblemSpec {
        ProblemSpec::builtin(model, 6, 10).unwrap()
    }

    #[test]
    fn linear_drift_is_gain_times_control() {
        let mut s = spec(BuiltinModel::Linear);
        s.drift.gain = vec![0.0; 12];
        s.drift.gain[0] = 1.0;
        let u = SpectralField::unit(6, 2);
        let b = s.drift_eval(&u, &[0.5, 0.0]).unwrap();
        assert_eq!(b.coeffs(), &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let v = SpectralField::from_coeffs(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.drift_control_vjp(&u, &[0.0, 0.0], &v).unwrap(), vec![2.0, 0.0]);
        let p = SpectralField::unit(6, 3);
        assert!(s.drift_jvp(&u, &[0.1, 0.2], &p).unwrap().coeffs().iter().all(|c| *c == 0.0));
        assert!(s.drift_vjp(&u, &[0.1, 0.2], &p).unwrap().coeffs().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn drift_vanishes_at_origin_for_all_builtins() {
        for m in BuiltinModel::ALL {
            let s = spec(m);
            let b = s.drift_eval(&SpectralField::zeros(6), &[0.0, 0.0]).unwrap();
            assert!(b.coeffs().iter().all(|c| *c == 0.0), "{m:?}");
        }
    }

    #[test]
    fn cubic_drift_on_first_mode() {
        // sin³θ = (3 sinθ − sin3θ)/4, so (√2 sin)³ has modes (3/2, 0, −1/2)
        let mut s = spec(BuiltinModel::Cubic);
        s.drift.c3 = 1.0;
        let u = SpectralField::unit(6, 1);
        let b = s.drift_eval(&u, &[0.0, 0.0]).unwrap();
        let uf = field_fn(&u);
        for k in 1..=6 {
            let oracle = -quad_coeff(|x| uf(x).powi(3), k);
            assert!((b.coeffs()[k - 1] - oracle).abs() < 1e-10, "mode {k}");
        }
        assert!((b.coeffs()[0] + 1.5).abs() < 1e-12);
        assert!((b.coeffs()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cubic_jvp_matches_quadrature() {
        let s = spec(BuiltinModel::Cubic);
        let c3 = s.drift.c3;
        let u = SpectralField::unit(6, 1);
        let jvp = s.drift_jvp(&u, &[0.0, 0.0], &u).unwrap();
        let uf = field_fn(&u);
        for k in 1..=6 {
            let oracle = -3.0 * c3 * quad_coeff(|x| uf(x).powi(3), k);
            assert!((jvp.coeffs()[k - 1] - oracle).abs() < 1e-10);
        }
        let zero = s.drift_jvp(&SpectralField::zeros(6), &[0.0, 0.0], &u).unwrap();
        assert!(zero.coeffs().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn burgers_drift_matches_quadrature() {
        let s = spec(BuiltinModel::Burgers);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let u = random_field(&mut rng, 6);
        let b = s.drift_eval(&u, &[0.0, 0.0]).unwrap();
        let (uf, uxf) = (field_fn(&u), field_dx_fn(&u));
        for k in 1..=6 {
            let oracle = -quad_coeff(|x| uf(x) * uxf(x), k);
            assert!((b.coeffs()[k - 1] - oracle).abs() < 1e-9, "mode {k}");
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for m in BuiltinModel::ALL {
            let s = spec(m);
            let u = random_field(&mut rng, 6);
            let p = random_field(&mut rng, 6);
            let phi = [0.3, -0.2];
            let h = 1e-6;
            let mut up = u.clone();
            up.axpy(h, &p);
            let mut um = u.clone();
            um.axpy(-h, &p);
            let fd = s.drift_eval(&up, &phi).unwrap().sub(&s.drift_eval(&um, &phi).unwrap()).scaled(0.5 / h);
            let jvp = s.drift_jvp(&u, &phi, &p).unwrap();
            for (a, b) in fd.coeffs().iter().zip(jvp.coeffs()) {
                assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{m:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_pairing_drift() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for m in BuiltinModel::ALL {
            let s = spec(m);
            for _ in 0..100 {
                let (u, p, v) = (
                    random_field(&mut rng, 6),
                    random_field(&mut rng, 6),
                    random_field(&mut rng, 6),
                );
                let phi = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let lhs = inner_h(&s.drift_jvp(&u, &phi, &p).unwrap(), &v).unwrap();
                let rhs = inner_h(&s.drift_vjp(&u, &phi, &v).unwrap(), &p).unwrap();
                let scale = lhs.abs().max(rhs.abs()).max(1e-300);
                if m != BuiltinModel::Linear {
                    assert!((lhs - rhs).abs() / scale < 1e-12, "{m:?}: {lhs} vs {rhs}");
                }
                let dphi = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let lhs = inner_h(&s.drift_control_jvp(&u, &phi, &dphi).unwrap(), &v).unwrap();
                let g = s.drift_control_vjp(&u, &phi, &v).unwrap();
                let rhs: f64 = g.iter().zip(&dphi).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() / lhs.abs().max(1e-300) < 1e-12);
            }
        }
    }

    #[test]
    fn cubic_vjp_is_jvp_with_roles_swapped() {
        let s = spec(BuiltinModel::Cubic);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (u, v) = (random_field(&mut rng, 6), random_field(&mut rng, 6));
        assert_eq!(
            s.drift_vjp(&u, &[0.0, 0.0], &v).unwrap(),
            s.drift_jvp(&u, &[0.0, 0.0], &v).unwrap()
        );
        assert_eq!(s.noise.kind, NoiseKind::BoundedMultiplicative);
    }

    #[test]
    fn control_jvp_of_zero_direction_is_zero() {
        let s = spec(BuiltinModel::Burgers);
        let u = SpectralField::unit(6, 1);
        let z = s.drift_control_jvp(&u, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(z.coeffs().iter().all(|c| *c == 0.0));
        assert!(s.drift_control_jvp(&u, &[1.0, 1.0], &[0.0]).is_err());
    }
}
