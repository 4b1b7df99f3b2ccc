use serde::{Deserialize, Serialize};

use super::config::{
    ControlsSection, CostSection, DriftSection, NoiseSection, ProblemConfig, SpaceSection,
    TimeSection, DEFAULT_GUARD, DEFAULT_HORIZON,
};
use super::{DriftKind, NoiseKind, ProblemSpec};
use crate::error::Result;

/// Shipped problem instances, all with two controls acting on modes 1 and 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinModel {
    /// Heat equation with additive noise and linear control: the LQ class.
    Linear,
    /// Allen–Cahn type `−u³` reaction with bounded multiplicative noise.
    Cubic,
    /// Viscous Burgers with additive noise.
    Burgers,
}

impl BuiltinModel {
    pub const ALL: [BuiltinModel; 3] = [Self::Linear, Self::Cubic, Self::Burgers];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cubic => "cubic",
            Self::Burgers => "burgers",
        }
    }

    pub fn config(self, n_modes: usize, n_steps: usize) -> ProblemConfig {
        let (kind, noise_kind, sigma, bound) = match self {
            Self::Linear => (DriftKind::LinearControl, NoiseKind::Additive, 0.1, 5.0),
            Self::Cubic => (DriftKind::CubicReaction, NoiseKind::BoundedMultiplicative, 0.5, 2.0),
            Self::Burgers => (DriftKind::BurgersConvection, NoiseKind::Additive, 0.1, 5.0),
        };
        ProblemConfig {
            space: SpaceSection {
                n_modes,
                u0: Some(vec![1.0, 0.5].into_iter().take(n_modes).collect()),
                diag: None,
                theta: None,
            },
            drift: DriftSection {
                kind,
                c3: Some(if kind == DriftKind::CubicReaction { 1.0 } else { 0.0 }),
                gain: None,
                k: None,
                k2: None,
                k3: None,
                k4: None,
                k5: None,
                rho_coeff: None,
                rho1_coeff: None,
                f0: None,
            },
            noise: NoiseSection {
                kind: Some(noise_kind),
                sigma: Some(vec![sigma; n_modes]),
                saturation: Some(1.0),
                m_noise: Some(n_modes),
                k6: None,
            },
            cost: CostSection {
                q: Some(1.0),
                r: Some(0.1),
                g: Some(1.0),
                ..CostSection::default()
            },
            controls: ControlsSection {
                lower: vec![-bound; 2],
                upper: vec![bound; 2],
            },
            time: TimeSection {
                horizon: Some(DEFAULT_HORIZON),
                n_steps: Some(n_steps),
                guard: Some(DEFAULT_GUARD),
            },
        }
    }
}

impl std::str::FromStr for BuiltinModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown model '{s}' (expected linear, cubic or burgers)"))
    }
}

pub(super) fn build(model: BuiltinModel, n_modes: usize, n_steps: usize) -> Result<ProblemSpec> {
    model.config(n_modes, n_steps).build("")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_constants() {
        let lin = ProblemSpec::builtin(BuiltinModel::Linear, 8, 200).unwrap();
        assert_eq!(lin.drift.constants.k, 0.0);
        assert_eq!(lin.dt(), 0.1 / 200.0);
        let cub = ProblemSpec::builtin(BuiltinModel::Cubic, 8, 200).unwrap();
        assert_eq!(cub.drift.constants.k, 0.25);
        assert_eq!(cub.drift.rho_coeff, 1.0);
        let bur = ProblemSpec::builtin(BuiltinModel::Burgers, 8, 200).unwrap();
        assert_eq!(bur.drift.constants.k, 2.0);
        assert_eq!(bur.drift.rho_coeff, 2.0);
        for m in BuiltinModel::ALL {
            assert_eq!(m.name().parse::<BuiltinModel>().unwrap(), m);
        }
    }

    #[test]
    fn single_mode_builtin() {
        let s = ProblemSpec::builtin(BuiltinModel::Linear, 1, 10).unwrap();
        assert_eq!(s.u0.coeffs(), &[1.0]);
        assert_eq!(s.drift.gain, vec![1.0, 0.0]);
    }
}
