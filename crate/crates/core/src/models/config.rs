//! TOML problem description.
//!
//! Every key except `space.n_modes`, `drift.kind` and the control bounds has
//! a default. [`ProblemConfig::from_spec`] materializes all of them so a
//! written copy reproduces the problem exactly.

use serde::{Deserialize, Serialize};

use super::{
    ControlSet, CostModel, DriftConstants, DriftKind, DriftModel, LinearOperatorSpec, NoiseKind,
    NoiseModel, ProblemSpec,
};
use crate::error::{Error, Result};
use crate::spectral::{SpectralField, SpectralSpace};

pub const DEFAULT_HORIZON: f64 = 0.1;
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_GUARD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub space: SpaceSection,
    pub drift: DriftSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub cost: CostSection,
    pub controls: ControlsSection,
    #[serde(default)]
    pub time: TimeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub n_modes: usize,
    /// Initial condition, zero-padded to `n_modes`.
    pub u0: Option<Vec<f64>>,
    /// Diagonal of `A`; defaults to the Dirichlet Laplacian `−λ_k`.
    pub diag: Option<Vec<f64>>,
    pub theta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub kind: DriftKind,
    pub c3: Option<f64>,
    /// Rows of `G`, one per mode; missing rows are zero.
    pub gain: Option<Vec<Vec<f64>>>,
    pub k: Option<f64>,
    pub k2: Option<f64>,
    pub k3: Option<f64>,
    pub k4: Option<f64>,
    pub k5: Option<f64>,
    pub rho_coeff: Option<f64>,
    pub rho1_coeff: Option<f64>,
    pub f0: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: Option<NoiseKind>,
    /// Per-mode amplitudes, zero-padded to `n_modes`.
    pub sigma: Option<Vec<f64>>,
    pub saturation: Option<f64>,
    pub m_noise: Option<usize>,
    pub k6: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: Option<f64>,
    pub r: Option<f64>,
    pub g: Option<f64>,
    pub u_ref: Option<Vec<f64>>,
    pub u_t: Option<Vec<f64>>,
    pub c_l: Option<f64>,
    pub c_k: Option<f64>,
    pub k_l: Option<f64>,
    pub k_k: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
    pub guard: Option<f64>,
}

/// 1-based line of `key` inside `[section]`, found by a plain text scan.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        match line_of(self.text, section, key) {
            Some(line) => Error::Config(format!("line {line}: {section}.{key}: {msg}")),
            None => Error::Config(format!("{section}.{key}: {msg}")),
        }
    }

    fn positive(&self, section: &str, key: &str, v: f64) -> Result<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(section, key, format!("must be positive and finite, got {v}")))
        }
    }

    fn non_negative(&self, section: &str, key: &str, v: f64) -> Result<f64> {
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(section, key, format!("must be non-negative and finite, got {v}")))
        }
    }

    fn field(&self, section: &str, key: &str, v: &Option<Vec<f64>>, n: usize) -> Result<SpectralField> {
        match v {
            None => Ok(SpectralField::zeros(n)),
            Some(c) => {
                if c.len() > n {
                    return Err(self.err(section, key, format!("{} entries exceed n_modes = {n}", c.len())));
                }
                SpectralField::padded(c, n).map_err(|e| self.err(section, key, e))
            }
        }
    }
}

/// `K` sufficient for local monotonicity of the built-in drift and noise.
fn default_k(kind: DriftKind, rho_coeff: f64, noise: &NoiseModel, n: usize) -> f64 {
    let drift = match kind {
        // 2⟨F(v₁)−F(v₂),d⟩ = −∫∂ₓv₂ d² ≤ √(2n)‖v₂‖_V‖d‖², absorbed by K + c‖v₂‖_V²
        DriftKind::BurgersConvection if rho_coeff > 0.0 => n as f64 / (2.0 * rho_coeff),
        DriftKind::BurgersConvection => f64::INFINITY,
        _ => 0.0,
    };
    let noise_part = match noise.kind {
        NoiseKind::Additive => 0.0,
        NoiseKind::BoundedMultiplicative => noise.sigma.iter().fold(0.0_f64, |m, s| m.max(s * s)),
    };
    drift + noise_part
}

fn default_rho_coeff(kind: DriftKind) -> f64 {
    match kind {
        DriftKind::LinearControl => 0.0,
        DriftKind::CubicReaction => 1.0,
        DriftKind::BurgersConvection => 2.0,
    }
}

/// Lipschitz constant of `Ξ'`: `max |d/da σ sech²(a/s)| = 4σ/(3√3 s)`.
fn default_k6(kind: NoiseKind, sigma: &[f64], s: f64) -> f64 {
    match kind {
        NoiseKind::Additive => 0.0,
        NoiseKind::BoundedMultiplicative => {
            let smax = sigma.iter().fold(0.0_f64, |m, x| m.max(*x));
            4.0 * smax / (3.0 * 3f64.sqrt() * s)
        }
    }
}

impl ProblemConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("problem config serializes")
    }

    /// Resolves defaults and validates; `text` is the source used to report
    /// line numbers and may be empty.
    pub fn build(&self, text: &str) -> Result<ProblemSpec> {
        let cx = Ctx { text };
        let n = self.space.n_modes;
        if n == 0 {
            return Err(cx.err("space", "n_modes", "must be positive"));
        }
        let space = SpectralSpace::new(n)?;

        let u0 = cx.field("space", "u0", &self.space.u0, n)?;
        let diag = match &self.space.diag {
            None => space.eigenvalues().iter().map(|l| -l).collect(),
            Some(d) => {
                if d.len() != n {
                    return Err(cx.err("space", "diag", format!("expected {n} entries, got {}", d.len())));
                }
                if d.iter().any(|x| !(x.is_finite() && *x < 0.0)) {
                    return Err(cx.err("space", "diag", "entries must be negative and finite"));
                }
                d.clone()
            }
        };
        let theta = cx.positive("space", "theta", self.space.theta.unwrap_or(2.0))?;
        let a_op = LinearOperatorSpec { diag, theta };

        let lower = &self.controls.lower;
        let upper = &self.controls.upper;
        if lower.is_empty() {
            return Err(cx.err("controls", "lower", "must have at least one entry"));
        }
        if lower.len() != upper.len() {
            return Err(cx.err(
                "controls",
                "upper",
                format!("length {} differs from lower length {}", upper.len(), lower.len()),
            ));
        }
        if let Some(i) = lower.iter().zip(upper).position(|(l, u)| !(l <= u)) {
            return Err(cx.err("controls", "upper", format!("entry {i} is below its lower bound")));
        }
        let controls = ControlSet::new(lower.clone(), upper.clone())?;
        let d = controls.dim();

        let ns = &self.noise;
        let noise_kind = ns.kind.unwrap_or(NoiseKind::Additive);
        let sigma = cx.field("noise", "sigma", &ns.sigma, n)?;
        if sigma.coeffs().iter().any(|s| *s < 0.0) {
            return Err(cx.err("noise", "sigma", "amplitudes must be non-negative"));
        }
        let saturation = cx.positive("noise", "saturation", ns.saturation.unwrap_or(1.0))?;
        let m_noise = ns.m_noise.unwrap_or(n);
        if m_noise == 0 {
            return Err(cx.err("noise", "m_noise", "must be positive"));
        }
        let k6 = match ns.k6 {
            Some(v) => cx.non_negative("noise", "k6", v)?,
            None => default_k6(noise_kind, sigma.coeffs(), saturation),
        };
        let noise = NoiseModel {
            kind: noise_kind,
            sigma: sigma.into_coeffs(),
            saturation,
            m_noise,
            k6,
        };

        let ds = &self.drift;
        let c3 = cx.non_negative("drift", "c3", ds.c3.unwrap_or(1.0))?;
        let gain = match &ds.gain {
            None => {
                let mut g = vec![0.0; n * d];
                for j in 0..d.min(n) {
                    g[j * d + j] = 1.0;
                }
                g
            }
            Some(rows) => {
                if rows.len() > n {
                    return Err(cx.err("drift", "gain", format!("{} rows exceed n_modes = {n}", rows.len())));
                }
                let mut g = vec![0.0; n * d];
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != d {
                        return Err(cx.err(
                            "drift",
                            "gain",
                            format!("row {i} has {} entries, control dimension is {d}", row.len()),
                        ));
                    }
                    if row.iter().any(|x| !x.is_finite()) {
                        return Err(cx.err("drift", "gain", format!("row {i} is not finite")));
                    }
                    g[i * d..(i + 1) * d].copy_from_slice(row);
                }
                g
            }
        };
        let rho_coeff = cx.non_negative(
            "drift",
            "rho_coeff",
            ds.rho_coeff.unwrap_or_else(|| default_rho_coeff(ds.kind)),
        )?;
        let rho1_coeff = ds.rho1_coeff.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&rho1_coeff) {
            return Err(cx.err("drift", "rho1_coeff", "must lie in [0, 1]"));
        }
        let k = match ds.k {
            Some(v) => cx.non_negative("drift", "k", v)?,
            None => default_k(ds.kind, rho_coeff, &noise, n),
        };
        if !k.is_finite() {
            return Err(cx.err("drift", "rho_coeff", "burgers drift needs rho_coeff > 0 unless k is given"));
        }
        let opt = |key: &str, v: Option<f64>| cx.non_negative("drift", key, v.unwrap_or(0.0));
        let constants = DriftConstants {
            k,
            k2: opt("k2", ds.k2)?,
            k3: opt("k3", ds.k3)?,
            k4: opt("k4", ds.k4)?,
            k5: opt("k5", ds.k5)?,
        };
        let f0 = match ds.f0 {
            Some(v) => cx.non_negative("drift", "f0", v)?,
            None => noise.gamma(),
        };
        let drift = DriftModel {
            kind: ds.kind,
            c3,
            gain,
            d_control: d,
            constants,
            rho_coeff,
            rho1_coeff,
            f0,
        };

        let cs = &self.cost;
        let q = cx.non_negative("cost", "q", cs.q.unwrap_or(1.0))?;
        let r = cx.positive("cost", "r", cs.r.unwrap_or(0.1))?;
        let g = cx.non_negative("cost", "g", cs.g.unwrap_or(1.0))?;
        let mut cost = CostModel::quadratic(n, q, r, g);
        cost.u_ref = cx.field("cost", "u_ref", &cs.u_ref, n)?;
        cost.u_t = cx.field("cost", "u_t", &cs.u_t, n)?;
        if let Some(v) = cs.c_l {
            cost.c_l = cx.non_negative("cost", "c_l", v)?;
        }
        if let Some(v) = cs.c_k {
            cost.c_k = cx.non_negative("cost", "c_k", v)?;
        }
        if let Some(v) = cs.k_l {
            cost.k_l = cx.non_negative("cost", "k_l", v)?;
        }
        if let Some(v) = cs.k_k {
            cost.k_k = cx.non_negative("cost", "k_k", v)?;
        }

        let ts = &self.time;
        let horizon = cx.positive("time", "horizon", ts.horizon.unwrap_or(DEFAULT_HORIZON))?;
        let n_steps = ts.n_steps.unwrap_or(DEFAULT_STEPS);
        if n_steps == 0 {
            return Err(cx.err("time", "n_steps", "must be positive"));
        }
        let guard = cx.positive("time", "guard", ts.guard.unwrap_or(DEFAULT_GUARD))?;

        ProblemSpec::new(space, a_op, drift, noise, cost, controls, horizon, n_steps, u0, guard)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Fully explicit configuration of `spec`.
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        let d = spec.d_control();
        let dr = &spec.drift;
        let c = &spec.cost;
        Self {
            space: SpaceSection {
                n_modes: spec.n_modes(),
                u0: Some(spec.u0.coeffs().to_vec()),
                diag: Some(spec.a_op.diag.clone()),
                theta: Some(spec.a_op.theta),
            },
            drift: DriftSection {
                kind: dr.kind,
                c3: Some(dr.c3),
                gain: Some(dr.gain.chunks(d).map(|r| r.to_vec()).collect()),
                k: Some(dr.constants.k),
                k2: Some(dr.constants.k2),
                k3: Some(dr.constants.k3),
                k4: Some(dr.constants.k4),
                k5: Some(dr.constants.k5),
                rho_coeff: Some(dr.rho_coeff),
                rho1_coeff: Some(dr.rho1_coeff),
                f0: Some(dr.f0),
            },
            noise: NoiseSection {
                kind: Some(spec.noise.kind),
                sigma: Some(spec.noise.sigma.clone()),
                saturation: Some(spec.noise.saturation),
                m_noise: Some(spec.noise.m_noise),
                k6: Some(spec.noise.k6),
            },
            cost: CostSection {
                q: Some(c.q),
                r: Some(c.r),
                g: Some(c.g),
                u_ref: Some(c.u_ref.coeffs().to_vec()),
                u_t: Some(c.u_t.coeffs().to_vec()),
                c_l: Some(c.c_l),
                c_k: Some(c.c_k),
                k_l: Some(c.k_l),
                k_k: Some(c.k_k),
            },
            controls: ControlsSection {
                lower: spec.controls.lower.clone(),
                upper: spec.controls.upper.clone(),
            },
            time: TimeSection {
                horizon: Some(spec.horizon),
                n_steps: Some(spec.n_steps),
                guard: Some(spec.guard),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BuiltinModel;

    const MINIMAL: &str = r#"
[space]
n_modes = 4
u0 = [1.0, 0.5]

[drift]
kind = "cubic-reaction"

[noise]
kind = "bounded-multiplicative"
sigma = [0.5, 0.5, 0.5, 0.5]

[controls]
lower = [-2.0, -2.0]
upper = [2.0, 2.0]
"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let spec = ProblemSpec::from_toml_str(MINIMAL).unwrap();
        assert_eq!(spec.n_modes(), 4);
        assert_eq!(spec.d_control(), 2);
        assert_eq!(spec.u0.coeffs(), &[1.0, 0.5, 0.0, 0.0]);
        assert_eq!(spec.drift.constants.k, 0.25);
        assert_eq!(spec.drift.gain_entry(0, 0), 1.0);
        assert_eq!(spec.drift.gain_entry(1, 1), 1.0);
        assert_eq!(spec.drift.gain_entry(0, 1), 0.0);
        assert_eq!(spec.n_steps, DEFAULT_STEPS);
        assert_eq!(spec.m_noise(), 4);
    }

    #[test]
    fn resolved_config_roundtrips() {
        for m in BuiltinModel::ALL {
            let spec = ProblemSpec::builtin(m, 5, 40).unwrap();
            let text = spec.to_config().to_toml_string();
            let again = ProblemSpec::from_toml_str(&text).unwrap();
            assert_eq!(again.to_config(), spec.to_config(), "{m:?}");
            assert_eq!(again.implicit_factors(), spec.implicit_factors());
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = MINIMAL.replace("kind = \"cubic-reaction\"", "kind = \"cubic-reaction\"\nbogus = 1");
        let err = ProblemSpec::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("line 8"), "{err}");
    }

    #[test]
    fn semantic_error_names_key_and_line() {
        let text = MINIMAL.replace("upper = [2.0, 2.0]", "upper = [2.0, -3.0]");
        let err = ProblemSpec::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("line 15"), "{err}");
        assert!(err.contains("controls.upper"), "{err}");

        let text = MINIMAL.replace("n_modes = 4", "n_modes = 4\ntheta = -1.0");
        let err = ProblemSpec::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("line 4: space.theta"), "{err}");
    }

    #[test]
    fn oversized_vectors_are_rejected() {
        let text = MINIMAL.replace("u0 = [1.0, 0.5]", "u0 = [1.0, 0.5, 0.0, 0.0, 9.0]");
        let err = ProblemSpec::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("space.u0"), "{err}");
    }

    #[test]
    fn line_scan_tracks_sections() {
        let text = "[a]\nx = 1\n[b]\nx = 2\n  y=3\n";
        assert_eq!(line_of(text, "a", "x"), Some(2));
        assert_eq!(line_of(text, "b", "x"), Some(4));
        assert_eq!(line_of(text, "b", "y"), Some(5));
        assert_eq!(line_of(text, "a", "y"), None);
    }
}
