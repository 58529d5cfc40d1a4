//! Loss coefficients, temperature and the ablation presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients and numerical guards of the dual self-distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsdConfig {
    /// Weight of the deep-supervision terms on decoder heads.
    pub eta: f64,
    /// Weight of the encoder-side distillation terms.
    pub alpha1: f64,
    /// Weight of the decoder-side distillation terms.
    pub alpha2: f64,
    /// Softmax temperature of the distillation distributions.
    pub tau: f64,
    pub dice_smooth_eps: f64,
    /// Lower clamp applied to probabilities inside logarithms.
    pub prob_clamp_floor: f64,
    /// Stop gradients into the teacher stages through the KL terms.
    pub detach_teacher: bool,
    /// Multiply the KL terms by `tau²`.
    pub kl_tau_squared: bool,
    /// Supervise decoder heads on their softened rather than τ=1 output.
    pub supervise_softened: bool,
}

impl Default for DsdConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            tau: 3.0,
            dice_smooth_eps: 1e-5,
            prob_clamp_floor: 1e-7,
            detach_teacher: true,
            kl_tau_squared: false,
            supervise_softened: false,
        }
    }
}

impl DsdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !self.dice_smooth_eps.is_finite() || self.dice_smooth_eps < 0.0 {
            return Err(Error::Config(format!(
                "dice_smooth_eps must be >= 0, got {}",
                self.dice_smooth_eps
            )));
        }
        if !(self.prob_clamp_floor > 0.0 && self.prob_clamp_floor < 1e-3) {
            return Err(Error::Config(format!(
                "prob_clamp_floor must lie in (0, 1e-3), got {}",
                self.prob_clamp_floor
            )));
        }
        Ok(())
    }

    /// Copy with `(eta, alpha1, alpha2)` taken from an ablation preset.
    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        let (eta, a1, a2) = mode.coefficients();
        self.eta = eta;
        self.alpha1 = a1;
        self.alpha2 = a2;
        self
    }

    pub(crate) fn kl_weights(&self) -> (f64, f64) {
        let scale = if self.kl_tau_squared { self.tau * self.tau } else { 1.0 };
        (self.alpha1 * scale, self.alpha2 * scale)
    }
}

/// Which auxiliary terms a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Main output only; no heads.
    #[serde(rename = "baseline")]
    Baseline,
    /// Deep supervision on decoder heads.
    #[serde(rename = "DS")]
    Ds,
    /// Deep supervision plus encoder-side distillation.
    #[serde(rename = "SDE")]
    Sde,
    /// Deep supervision plus decoder-side distillation.
    #[serde(rename = "SDD")]
    Sdd,
    /// Deep supervision plus distillation on both sides.
    #[serde(rename = "DSD")]
    Dsd,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Baseline,
        AblationMode::Ds,
        AblationMode::Sde,
        AblationMode::Sdd,
        AblationMode::Dsd,
    ];

    /// Preset `(eta, alpha1, alpha2)`.
    pub fn coefficients(self) -> (f64, f64, f64) {
        match self {
            AblationMode::Baseline => (0.0, 0.0, 0.0),
            AblationMode::Ds => (1.0, 0.0, 0.0),
            AblationMode::Sde => (1.0, 1.0, 0.0),
            AblationMode::Sdd => (1.0, 0.0, 1.0),
            AblationMode::Dsd => (1.0, 1.0, 1.0),
        }
    }

    pub fn uses_decoder_heads(self) -> bool {
        self != AblationMode::Baseline
    }

    pub fn uses_encoder_heads(self) -> bool {
        matches!(self, AblationMode::Sde | AblationMode::Dsd)
    }

    pub fn uses_encoder_kl(self) -> bool {
        self.uses_encoder_heads()
    }

    pub fn uses_decoder_kl(self) -> bool {
        matches!(self, AblationMode::Sdd | AblationMode::Dsd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Ds => "DS",
            AblationMode::Sde => "SDE",
            AblationMode::Sdd => "SDD",
            AblationMode::Dsd => "DSD",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation mode {s:?} (expected baseline, DS, SDE, SDD or DSD)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_ablation_table() {
        let cfg = DsdConfig::default();
        assert_eq!(cfg.with_mode(AblationMode::Ds).alpha1, 0.0);
        let sde = cfg.with_mode(AblationMode::Sde);
        assert_eq!((sde.eta, sde.alpha1, sde.alpha2), (1.0, 1.0, 0.0));
        let sdd = cfg.with_mode(AblationMode::Sdd);
        assert_eq!((sdd.eta, sdd.alpha1, sdd.alpha2), (1.0, 0.0, 1.0));
        let dsd = cfg.with_mode(AblationMode::Dsd);
        assert_eq!((dsd.eta, dsd.alpha1, dsd.alpha2), (1.0, 1.0, 1.0));
        assert_eq!(AblationMode::Baseline.coefficients(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = DsdConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tau, 3.0);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            DsdConfig { tau: 0.0, ..Default::default() },
            DsdConfig { eta: -1.0, ..Default::default() },
            DsdConfig { alpha2: f64::NAN, ..Default::default() },
            DsdConfig { prob_clamp_floor: 1e-2, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("XYZ".parse::<AblationMode>().is_err());
    }
}
