//! Spectral truncation of the Gelfand triple `V ⊂ H ⊂ V'` on the unit interval.
//!
//! `H = L²(0,1)`, `V = H¹₀(0,1)` with the gradient seminorm, and the basis is the
//! Dirichlet sine family `w_k(x) = √2 sin(kπx)` with eigenvalues `λ_k = (kπ)²`.
//! Every norm is diagonal in this basis:
//!
//! ```text
//! ‖a‖²    = Σ a_k²
//! ‖a‖_V²  = Σ λ_k a_k²
//! ‖a‖_V'² = Σ a_k² / λ_k
//! ```
//!
//! Nonlinear products are formed pseudo-spectrally on `G = 4n` uniform
//! intervals. Cubic products of degree-`n` sine polynomials contain
//! frequencies up to `3n < 2G - n`, so the discrete sine projection is free of
//! aliasing and reproduces `Π_n(u³)` and `Π_n(u·∂ₓu)` up to rounding.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Grid oversampling factor used for pseudo-spectral products.
pub const GRID_FACTOR: usize = 4;

/// Coefficients `a_k` of `Σ a_k w_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(n: usize) -> Self {
        Self { coeffs: vec![0.0; n] }
    }

    /// Unit field `e_k` (1-based mode index, matching `w_k`).
    pub fn unit(n: usize, mode: usize) -> Self {
        assert!(mode >= 1 && mode <= n, "mode {mode} outside 1..={n}");
        let mut f = Self::zeros(n);
        f.coeffs[mode - 1] = 1.0;
        f
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().all(|c| c.is_finite()) {
            Ok(Self { coeffs })
        } else {
            Err(Error::NonFinite)
        }
    }

    /// Builds a field of length `n` from a possibly shorter coefficient list,
    /// padding the tail with zeros.
    pub fn padded(coeffs: &[f64], n: usize) -> Result<Self> {
        if coeffs.len() > n {
            return Err(Error::invalid(format!(
                "{} coefficients given for {n} modes",
                coeffs.len()
            )));
        }
        let mut v = coeffs.to_vec();
        v.resize(n, 0.0);
        Self::from_coeffs(v)
    }

    pub(crate) fn from_vec_unchecked(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Unchecked `Σ a_k b_k`; callers guarantee equal lengths.
    pub(crate) fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub(crate) fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += alpha * other`
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += alpha * b;
        }
    }

    pub(crate) fn scaled(&self, alpha: f64) -> Self {
        Self::from_vec_unchecked(self.coeffs.iter().map(|a| alpha * a).collect())
    }

    pub(crate) fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self::from_vec_unchecked(
            self.coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// Binary encoding: `u32` mode count, then little-endian `f64` coefficients.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.coeffs.len() as u32).to_le_bytes())?;
        for c in &self.coeffs {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let n = u32::from_le_bytes(count) as usize;
        let mut coeffs = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            coeffs.push(f64::from_le_bytes(buf));
        }
        Self::from_coeffs(coeffs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = Self::read_from(bytes)?;
        if 4 + 8 * f.len() != bytes.len() {
            return Err(Error::invalid("trailing bytes after field payload"));
        }
        Ok(f)
    }
}

/// Hilbert–Schmidt operator from the truncated noise space `U_m` into `H_n`,
/// stored row-major (`rows = n_modes`, `cols = m_noise`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsOperator {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl HsOperator {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn from_entries(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, entries.len())?;
        if !entries.iter().all(|e| e.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for k in 0..n {
            m.set(k, k, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.entries[i * self.cols + j] = value;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Action on a noise increment: `(M dW)_i = Σ_j M_ij dW_j`.
    pub fn apply(&self, dw: &[f64]) -> Vec<f64> {
        debug_assert_eq!(dw.len(), self.cols);
        self.entries
            .chunks(self.cols)
            .map(|row| row.iter().zip(dw).map(|(m, w)| m * w).sum())
            .collect()
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        for e in &mut self.entries {
            *e *= alpha;
        }
    }
}

/// `Σ a_k b_k`.
pub fn inner_h(a: &SpectralField, b: &SpectralField) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.dot(b))
}

/// Frobenius inner product `⟨M, N⟩₂ = Σ M_ij N_ij`.
pub fn hs_inner(m: &HsOperator, n: &HsOperator) -> Result<f64> {
    check_len(m.rows, n.rows)?;
    check_len(m.cols, n.cols)?;
    Ok(m.entries.iter().zip(&n.entries).map(|(a, b)| a * b).sum())
}

pub fn hs_norm(m: &HsOperator) -> f64 {
    m.entries.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Truncation `Π_n`: keeps the first `n` coefficients.
pub fn project_modes(a: &SpectralField, n: usize) -> Result<SpectralField> {
    if n == 0 || n > a.len() {
        return Err(Error::invalid(format!(
            "cannot project a {}-mode field onto {n} modes",
            a.len()
        )));
    }
    Ok(SpectralField::from_vec_unchecked(a.coeffs[..n].to_vec()))
}

/// Point value `Σ a_k √2 sin(kπx)` for `x ∈ (0,1)`.
pub fn evaluate_at(a: &SpectralField, x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::invalid(format!("evaluation point {x} outside (0,1)")));
    }
    Ok(a
        .coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| c * SQRT_2 * ((k + 1) as f64 * PI * x).sin())
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Norms {
    pub h: f64,
    pub v: f64,
    pub v_dual: f64,
}

/// Dirichlet sine space with `n_modes` modes and its pseudo-spectral grid.
#[derive(Clone, Debug)]
pub struct SpectralSpace {
    n_modes: usize,
    eigenvalues: Vec<f64>,
    intervals: usize,
    // (G-1) × n tables of w_k(x_g) and w_k'(x_g)
    basis: Vec<f64>,
    basis_dx: Vec<f64>,
}

impl SpectralSpace {
    pub fn new(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::invalid("n_modes must be positive"));
        }
        let eigenvalues = (1..=n_modes).map(|k| (k as f64 * PI).powi(2)).collect();
        let intervals = GRID_FACTOR * n_modes;
        let points = intervals - 1;
        let mut basis = Vec::with_capacity(points * n_modes);
        let mut basis_dx = Vec::with_capacity(points * n_modes);
        for g in 1..=points {
            let x = g as f64 / intervals as f64;
            for k in 1..=n_modes {
                let freq = k as f64 * PI;
                basis.push(SQRT_2 * (freq * x).sin());
                basis_dx.push(SQRT_2 * freq * (freq * x).cos());
            }
        }
        Ok(Self {
            n_modes,
            eigenvalues,
            intervals,
            basis,
            basis_dx,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Embedding constant with `‖v‖² ≤ c_HV ‖v‖_V²`, equal to `1/λ₁`.
    pub fn c_hv(&self) -> f64 {
        1.0 / self.eigenvalues[0]
    }

    pub fn norms(&self, a: &SpectralField) -> Result<Norms> {
        check_len(self.n_modes, a.len())?;
        if !a.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Norms {
            h: a.norm_sq().sqrt(),
            v: self.v_norm_sq(a).sqrt(),
            v_dual: a
                .coeffs
                .iter()
                .zip(&self.eigenvalues)
                .map(|(c, l)| c * c / l)
                .sum::<f64>()
                .sqrt(),
        })
    }

    pub(crate) fn v_norm_sq(&self, a: &SpectralField) -> f64 {
        a.coeffs
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, l)| l * c * c)
            .sum()
    }

    pub fn grid_points(&self) -> usize {
        self.intervals - 1
    }

    fn synthesize(&self, table: &[f64], a: &SpectralField) -> Vec<f64> {
        debug_assert_eq!(a.len(), self.n_modes);
        table
            .chunks(self.n_modes)
            .map(|row| row.iter().zip(&a.coeffs).map(|(w, c)| w * c).sum())
            .collect()
    }

    /// Values of the field at the interior grid points `x_g = g/G`.
    pub fn to_grid(&self, a: &SpectralField) -> Vec<f64> {
        self.synthesize(&self.basis, a)
    }

    /// Values of `∂ₓ` of the field at the interior grid points.
    pub fn dx_to_grid(&self, a: &SpectralField) -> Vec<f64> {
        self.synthesize(&self.basis_dx, a)
    }

    /// Discrete sine projection `c_k = (1/G) Σ_g f(x_g) w_k(x_g)`.
    pub fn from_grid(&self, values: &[f64]) -> SpectralField {
        debug_assert_eq!(values.len(), self.grid_points());
        let mut coeffs = vec![0.0; self.n_modes];
        for (row, f) in self.basis.chunks(self.n_modes).zip(values) {
            for (c, w) in coeffs.iter_mut().zip(row) {
                *c += f * w;
            }
        }
        let scale = 1.0 / self.intervals as f64;
        for c in &mut coeffs {
            *c *= scale;
        }
        SpectralField::from_vec_unchecked(coeffs)
    }
}
