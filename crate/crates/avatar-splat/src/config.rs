use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adam::SplatLrs;
use crate::appearance::EncodingConfig;
use crate::error::{Error, Result};
use crate::flowdens::DensifyConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub position: f64,
    pub motion: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub temporal: f64,
    pub feature: f64,
    pub mlp: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            position: 1.6e-4,
            motion: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            temporal: 1e-3,
            feature: 2.5e-3,
            mlp: 1e-3,
        }
    }
}

impl LrConfig {
    pub fn splat_lrs(&self) -> SplatLrs {
        SplatLrs {
            position: self.position,
            motion: self.motion,
            rotation: self.rotation,
            scale: self.scale,
            opacity: self.opacity,
            temporal: self.temporal,
            feature: self.feature,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    /// Polynomial degree of the per-splat position motion.
    pub n_p: usize,
    /// Polynomial degree of the per-splat rotation motion.
    pub n_q: usize,
    /// Appearance feature width (ignored in spherical-harmonics mode).
    pub feat_dim: usize,
    /// Hidden width of the color MLP.
    pub hidden: usize,
    pub init_count: usize,
    pub splat_budget: usize,
    pub lr: LrConfig,
    /// Weight of (1 - SSIM) inside the photometric loss.
    pub ssim_weight: f64,
    /// Target ratios of the flow, temporal, and regularization losses
    /// relative to the photometric loss.
    pub loss_ratios: [f64; 3],
    pub ema_decay: f64,
    pub densify: DensifyConfig,
    pub densify_interval: u64,
    pub densify_start: u64,
    pub densify_stop: u64,
    pub max_new_per_event: usize,
    pub prune_floor: f64,
    /// Frames excluded from training and used for evaluation.
    pub holdout: Vec<usize>,
    pub encoding: EncodingConfig,
    /// Append a metrics CSV row every this many iterations.
    pub metrics_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            seed: 0,
            n_p: 2,
            n_q: 1,
            feat_dim: 8,
            hidden: 48,
            init_count: 5000,
            splat_budget: 8000,
            lr: LrConfig::default(),
            ssim_weight: 0.2,
            loss_ratios: [0.1, 0.05, 0.01],
            ema_decay: 0.99,
            densify: DensifyConfig::default(),
            densify_interval: 200,
            densify_start: 500,
            densify_stop: 8000,
            max_new_per_event: 256,
            prune_floor: 0.005,
            holdout: vec![7, 15, 23],
            encoding: EncodingConfig::default(),
            metrics_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 {
            return Err(Error::argument("position motion needs degree at least 1"));
        }
        if self.init_count == 0 || self.splat_budget == 0 {
            return Err(Error::argument(
                "initial splat count and splat budget must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::argument("ssim weight must lie in [0, 1]"));
        }
        if self.densify_interval == 0 || self.metrics_every == 0 {
            return Err(Error::argument("intervals must be positive"));
        }
        Ok(())
    }
}

/// Training variants: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Everything on.
    Full,
    /// No flow loss, flow-guided sampling, or consistency checks.
    NoFlow,
    /// Splats frozen in time: no motion or rotation polynomials, no
    /// temporal opacity envelope.
    NoStg,
    /// Spherical-harmonics colors instead of the MLP.
    Sh,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::NoFlow => "no-flow",
            TrainMode::NoStg => "no-stg",
            TrainMode::Sh => "sh",
        }
    }

    pub fn all() -> [TrainMode; 4] {
        [TrainMode::Full, TrainMode::NoFlow, TrainMode::NoStg, TrainMode::Sh]
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMode> {
        match s {
            "full" => Ok(TrainMode::Full),
            "no-flow" => Ok(TrainMode::NoFlow),
            "no-stg" => Ok(TrainMode::NoStg),
            "sh" => Ok(TrainMode::Sh),
            other => Err(Error::argument(format!(
                "unknown mode {other:?} (expected full, no-flow, no-stg, or sh)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.iterations, cfg.iterations);
        assert_eq!(back.lr.opacity, cfg.lr.opacity);
        assert_eq!(back.holdout, cfg.holdout);
    }

    #[test]
    fn partial_config_fills_defaults_and_typos_fail() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"iterations": 10}"#).unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.hidden, TrainConfig::default().hidden);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iteratons": 10}"#).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 0;
        cfg.validate().unwrap();
        let mut cfg = TrainConfig::default();
        cfg.splat_budget = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.ssim_weight = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn modes_parse_and_print() {
        for m in TrainMode::all() {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("fancy".parse::<TrainMode>().is_err());
    }
}
