//! Experiment configuration in flat `key=value` text.
//!
//! Blank lines and lines starting with `#` are ignored; unknown keys are
//! errors. [`ExperimentConfig::to_text`] writes every field, so a written
//! config (or a run manifest, whose extra lines are comments) parses back
//! to the same value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::RectifiedLossConfig;
use crate::model::NetConfig;
use crate::synthdata::{AugmentPolicy, ShiftPreset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    PlainCe,
    Rectified,
    Thresholded(f64),
}

impl LossMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PlainCe => "plain_ce",
            Self::Rectified => "rectified",
            Self::Thresholded(_) => "thresholded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoSource {
    /// Fully pretrained source model.
    Strong,
    /// Source model trained for half the iterations.
    Weak,
}

impl FromStr for PseudoSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Self::Strong),
            "weak" => Ok(Self::Weak),
            other => Err(Error::Config(format!("unknown pseudo_source {other:?}"))),
        }
    }
}

impl PseudoSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Strong => "strong",
            Self::Weak => "weak",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds used by multi-seed sweeps.
    pub seeds: Vec<u64>,
    pub shift_preset: ShiftPreset,
    pub n_source: usize,
    pub n_source_test: usize,
    pub n_target: usize,
    pub n_target_test: usize,

    pub net: NetConfig,

    pub source_iters: usize,
    pub source_lr: f64,
    pub source_aux_weight: f64,
    pub adapt_iters: usize,
    pub early_stop: f64,
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub augment: AugmentPolicy,

    pub loss: LossMode,
    /// Threshold used when `loss` is thresholded.
    pub tau: f64,
    pub rectified: RectifiedLossConfig,
    pub pseudo_source: PseudoSource,
    /// Debug: feed the primary logits to both heads' loss inputs.
    pub tie_heads: bool,

    pub alpha: f64,
    pub beta: f64,

    pub mc_rate: f64,
    pub mc_samples: usize,
    /// Number of test images exported as heatmaps.
    pub heatmaps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            shift_preset: ShiftPreset::Default,
            n_source: 400,
            n_source_test: 100,
            n_target: 400,
            n_target_test: 100,
            net: NetConfig::default(),
            source_iters: 1000,
            source_lr: 0.03,
            source_aux_weight: 0.5,
            adapt_iters: 800,
            early_stop: 0.5,
            base_lr: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            batch_size: 8,
            augment: AugmentPolicy::default(),
            loss: LossMode::Rectified,
            tau: 0.0,
            rectified: RectifiedLossConfig::default(),
            pseudo_source: PseudoSource::Strong,
            tie_heads: false,
            alpha: 1.0,
            beta: 0.5,
            mc_rate: 0.5,
            mc_samples: 10,
            heatmaps: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Number of adaptation iterations actually run.
    pub fn adapt_stop(&self) -> usize {
        ((self.early_stop * self.adapt_iters as f64).ceil() as usize).min(self.adapt_iters)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.early_stop > 0.0 && self.early_stop <= 1.0) {
            return Err(Error::Config(format!(
                "early_stop {} outside (0, 1]",
                self.early_stop
            )));
        }
        if self.batch_size == 0
            || self.n_source == 0
            || self.n_target == 0
            || self.n_target_test == 0
        {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.n_source_test == 0 {
            return Err(Error::Config("n_source_test must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for (k, v) in [
            ("source_lr", self.source_lr),
            ("base_lr", self.base_lr),
            ("poly_power", self.poly_power),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be a nonnegative number")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if let LossMode::Thresholded(t) = self.loss {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("tau {t} outside [0, 1]")));
            }
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(
                "inference weights must be nonnegative, not both 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mc_rate) || self.mc_samples == 0 {
            return Err(Error::Config(
                "mc_rate in [0,1) and mc_samples >= 1 required".into(),
            ));
        }
        self.net
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "shift_preset" => {
                self.shift_preset = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "n_source" => self.n_source = parse(key, v)?,
            "n_source_test" => self.n_source_test = parse(key, v)?,
            "n_target" => self.n_target = parse(key, v)?,
            "n_target_test" => self.n_target_test = parse(key, v)?,
            "widths" => self.net.widths = parse_list(key, v)?,
            "aux_tap" => self.net.aux_tap = parse(key, v)?,
            "kernel" => self.net.kernel = parse(key, v)?,
            "dropout_rate" => self.net.dropout_rate = parse(key, v)?,
            "classes" => self.net.classes = parse(key, v)?,
            "source_iters" => self.source_iters = parse(key, v)?,
            "source_lr" => self.source_lr = parse(key, v)?,
            "source_aux_weight" => self.source_aux_weight = parse(key, v)?,
            "adapt_iters" => self.adapt_iters = parse(key, v)?,
            "early_stop" => self.early_stop = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "poly_power" => self.poly_power = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "flip_p" => self.augment.flip_p = parse(key, v)?,
            "scale_min" => self.augment.scale_min = parse(key, v)?,
            "scale_max" => self.augment.scale_max = parse(key, v)?,
            "crop_h" => self.augment.crop_h = parse(key, v)?,
            "crop_w" => self.augment.crop_w = parse(key, v)?,
            "loss" => {
                self.loss = match v {
                    "plain_ce" => LossMode::PlainCe,
                    "rectified" => LossMode::Rectified,
                    "thresholded" => LossMode::Thresholded(self.tau),
                    other => return Err(Error::Config(format!("unknown loss mode {other:?}"))),
                }
            }
            "tau" => {
                self.tau = parse(key, v)?;
                if let LossMode::Thresholded(_) = self.loss {
                    self.loss = LossMode::Thresholded(self.tau);
                }
            }
            "distance" => {
                self.rectified.distance =
                    v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "variance_grad" => {
                self.rectified.variance_grad =
                    v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "aux_ce_weight" => self.rectified.aux_ce_weight = parse(key, v)?,
            "pseudo_source" => self.pseudo_source = v.parse()?,
            "tie_heads" => self.tie_heads = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "mc_rate" => self.mc_rate = parse(key, v)?,
            "mc_samples" => self.mc_samples = parse(key, v)?,
            "heatmaps" => self.heatmaps = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every field, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.augment;
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("shift_preset", self.shift_preset.to_string()),
            ("n_source", self.n_source.to_string()),
            ("n_source_test", self.n_source_test.to_string()),
            ("n_target", self.n_target.to_string()),
            ("n_target_test", self.n_target_test.to_string()),
            ("widths", join(&self.net.widths)),
            ("aux_tap", self.net.aux_tap.to_string()),
            ("kernel", self.net.kernel.to_string()),
            ("dropout_rate", self.net.dropout_rate.to_string()),
            ("classes", self.net.classes.to_string()),
            ("source_iters", self.source_iters.to_string()),
            ("source_lr", self.source_lr.to_string()),
            ("source_aux_weight", self.source_aux_weight.to_string()),
            ("adapt_iters", self.adapt_iters.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("flip_p", a.flip_p.to_string()),
            ("scale_min", a.scale_min.to_string()),
            ("scale_max", a.scale_max.to_string()),
            ("crop_h", a.crop_h.to_string()),
            ("crop_w", a.crop_w.to_string()),
            ("loss", self.loss.name().to_string()),
            ("tau", self.tau.to_string()),
            ("distance", self.rectified.distance.name().to_string()),
            (
                "variance_grad",
                self.rectified.variance_grad.name().to_string(),
            ),
            ("aux_ce_weight", self.rectified.aux_ce_weight.to_string()),
            ("pseudo_source", self.pseudo_source.name().to_string()),
            ("tie_heads", self.tie_heads.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("mc_rate", self.mc_rate.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("heatmaps", self.heatmaps.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Distance;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.tau = 0.95;
        cfg.loss = LossMode::Thresholded(0.95);
        cfg.seeds = vec![3, 9];
        cfg.rectified.distance = Distance::Mse;
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn tau_before_loss_is_honoured() {
        let cfg = ExperimentConfig::from_text("tau=0.8\nloss=thresholded\n").unwrap();
        assert_eq!(cfg.loss, LossMode::Thresholded(0.8));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_text("# comment\nseed=1\nlearning_rate=3\n").unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_text("early_stop=0").is_err());
        assert!(ExperimentConfig::from_text("aux_tap=4").is_err());
        assert!(ExperimentConfig::from_text("loss=focal").is_err());
        assert!(ExperimentConfig::from_text("seed").is_err());
    }

    #[test]
    fn early_stop_count() {
        let mut cfg = ExperimentConfig::default();
        cfg.adapt_iters = 2000;
        assert_eq!(cfg.adapt_stop(), 1000);
        cfg.adapt_iters = 5;
        assert_eq!(cfg.adapt_stop(), 3);
    }
}
