//! Built-in scenarios and their experiment settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, LossKind};
use crate::learners::LearnerConfig;
use crate::simulation::{NoiseScales, OutputKind, RegimeSpec, ScenarioSpec, TruthProcess};

/// Discount used by the nonstationary presets.
pub const NONSTATIONARY_DISCOUNT: f64 = 0.9999;

/// Regime boundaries of the nonstationary presets.
pub const NONSTATIONARY_BOUNDARIES: [usize; 4] = [0, 5_000, 9_000, 15_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    StationaryConvex,
    StationaryNonconvex,
    NonstationaryConvex,
    NonstationaryNonconvex,
    SquintVsEg,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::StationaryConvex,
        Preset::StationaryNonconvex,
        Preset::NonstationaryConvex,
        Preset::NonstationaryNonconvex,
        Preset::SquintVsEg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::StationaryConvex => "stationary-convex",
            Preset::StationaryNonconvex => "stationary-nonconvex",
            Preset::NonstationaryConvex => "nonstationary-convex",
            Preset::NonstationaryNonconvex => "nonstationary-nonconvex",
            Preset::SquintVsEg => "squint-vs-eg",
        }
    }

    fn stationary(self) -> bool {
        matches!(
            self,
            Preset::StationaryConvex | Preset::StationaryNonconvex | Preset::SquintVsEg
        )
    }

    /// The scenario with the given seed.
    pub fn scenario(self, seed: u64) -> ScenarioSpec {
        let regime = |start_step: usize, q: &[f64]| RegimeSpec {
            start_step,
            expert_quality: q.to_vec(),
            truth_process: TruthProcess::default(),
        };
        let (n_experts, total_steps, regimes) = if self.stationary() {
            (3, 5_000, vec![regime(0, &[0.1, 1.0, 3.0])])
        } else {
            // the best expert hands over to the next one at each boundary
            let b = NONSTATIONARY_BOUNDARIES;
            (
                4,
                20_000,
                vec![
                    regime(b[0], &[0.1, 0.1075, 0.115, 0.115]),
                    regime(b[1], &[3.0, 0.1, 0.1075, 0.115]),
                    regime(b[2], &[3.0, 3.0, 0.1, 0.1075]),
                    regime(b[3], &[3.0, 3.0, 3.0, 0.1]),
                ],
            )
        };
        ScenarioSpec {
            n_experts,
            n_modes: 5,
            horizon: 12,
            total_steps,
            regimes,
            rng_seed: seed,
            noise: NoiseScales::default(),
            mode_concentration: 1.0,
            lane_offset: 3.5,
            uncalibrated: Vec::new(),
            output: OutputKind::Gmm,
        }
    }

    /// Learner, loss and metric settings.
    pub fn experiment(self) -> ExperimentConfig {
        let loss = match self {
            Preset::StationaryNonconvex | Preset::NonstationaryNonconvex => LossKind::SoftMinFrde,
            _ => LossKind::Probability,
        };
        let discount = if self.stationary() {
            1.0
        } else {
            NONSTATIONARY_DISCOUNT
        };
        ExperimentConfig {
            learner: LearnerConfig {
                discount,
                ..LearnerConfig::default()
            },
            loss,
            ..ExperimentConfig::default()
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::config("preset", format!("unknown preset `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in Preset::ALL {
            p.scenario(1).validate().unwrap();
            p.experiment().validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }
}
