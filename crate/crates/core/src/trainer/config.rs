use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ArchConfig;
use crate::config::{AblationMode, DsdConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Only `adam` is implemented.
    pub name: String,
    pub learning_rate: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Explicit `(eta, alpha1, alpha2)` applied after the ablation preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub eta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dsd: DsdConfig,
    pub arch: ArchConfig,
    pub ablation_mode: AblationMode,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment_flips: bool,
    pub manifest_path: PathBuf,
    pub output_dir: PathBuf,
    /// Replaces the preset coefficients while keeping the preset's set of
    /// evaluated terms, e.g. DSD with both alphas at zero.
    pub coefficient_override: Option<Coefficients>,
    /// Stop once validation Dice reaches this value.
    pub target_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dsd: DsdConfig::default(),
            arch: ArchConfig::default(),
            ablation_mode: AblationMode::Dsd,
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: 2,
            seed: 0,
            augment_flips: true,
            manifest_path: PathBuf::from("data/manifest.json"),
            output_dir: PathBuf::from("runs/default"),
            coefficient_override: None,
            target_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_dsd()?;
        self.arch.validate()?;
        let o = &self.optimizer;
        if o.name != "adam" {
            return Err(Error::Config(format!("unknown optimizer {:?} (only \"adam\")", o.name)));
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", o.learning_rate)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", o.weight_decay)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Loss configuration after applying the preset and any override.
    pub fn effective_dsd(&self) -> Result<DsdConfig> {
        let mut d = self.dsd.with_mode(self.ablation_mode);
        if let Some(c) = self.coefficient_override {
            d.eta = c.eta;
            d.alpha1 = c.alpha1;
            d.alpha2 = c.alpha2;
        }
        d.validate()?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_then_override() {
        let mut cfg = TrainConfig {
            ablation_mode: AblationMode::Sde,
            ..Default::default()
        };
        let d = cfg.effective_dsd().unwrap();
        assert_eq!((d.eta, d.alpha1, d.alpha2), (1.0, 1.0, 0.0));
        cfg.coefficient_override = Some(Coefficients { eta: 1.0, alpha1: 0.0, alpha2: 0.0 });
        assert_eq!(cfg.effective_dsd().unwrap().alpha1, 0.0);
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let err = serde_json::from_str::<TrainConfig>("{\n  \"epochs\": 3,\n  \"epoch\": 4\n}").unwrap_err();
        assert_eq!(err.line(), 3);
        assert!(err.to_string().contains("epoch"));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"ablation_mode": "DS", "dsd": {"tau": 2.0}}"#).unwrap();
        assert_eq!(cfg.ablation_mode, AblationMode::Ds);
        assert_eq!(cfg.dsd.tau, 2.0);
        assert_eq!(cfg.optimizer.learning_rate, 1e-3);
    }
}
