//! Training configuration, read from TOML with optional `key=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrrn::HrrnConfig;
use crate::lrscn::LrscnConfig;
use crate::metrics::CannyParams;
use crate::nn::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lrscn,
    Hrrn,
}

/// What supervises the refinement network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrrnObjective {
    /// L1 on definite pixels plus the uncertainty loss on the band.
    Uncertainty,
    /// L1 on definite pixels only; the band is unsupervised.
    L1Definite,
    /// L1 on every pixel.
    L1All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub hflip: bool,
    pub multiscale: bool,
    pub scales: Vec<f64>,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            hflip: true,
            multiscale: true,
            scales: vec![0.75, 1.0, 1.25],
        }
    }
}

/// Refinement-stage data preparation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrrnData {
    /// Side of the square the scenes are resized to (twice the tile side).
    pub canonical_size: usize,
    /// Side of the random training crops.
    pub crop_size: usize,
    /// The training band is drawn on the mask shrunk by this factor, the
    /// scale at which the first stage sees the scene; 1 draws it at the
    /// canonical size.
    pub trimap_downscale: usize,
    /// The band is then quantized to cells of this many (shrunk) pixels, the
    /// first stage's output stride, to mimic the coarse trimaps handed over
    /// at inference; 1 disables it.
    pub trimap_grid: usize,
    /// Probability of centring a crop on an uncertain pixel.
    pub band_crop_probability: f64,
}

impl Default for HrrnData {
    fn default() -> Self {
        Self {
            canonical_size: 256,
            crop_size: 64,
            trimap_downscale: 2,
            trimap_grid: 4,
            band_crop_probability: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Maximum rate of backbone weights (LRSCN only).
    pub lr_backbone: f64,
    /// Maximum rate of every other weight.
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub augment: Augment,
    pub objective: HrrnObjective,
    pub log_every: usize,
    pub lrscn: LrscnConfig,
    pub hrrn: HrrnConfig,
    pub hrrn_data: HrrnData,
    pub canny: CannyParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Stage::Lrscn)
    }
}

impl TrainConfig {
    /// CPU-sized settings.
    pub fn desk(stage: Stage) -> Self {
        let (lr_backbone, lr_head, schedule, batch, warmup) = match stage {
            Stage::Lrscn => (0.005, 0.05, Schedule::WarmupLinear, 8, 100),
            Stage::Hrrn => (0.02, 0.02, Schedule::WarmupCosine, 8, 100),
        };
        Self {
            stage,
            seed: 0,
            steps: 2000,
            batch_size: batch,
            warmup_steps: warmup,
            lr_backbone,
            lr_head,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule,
            augment: Augment::default(),
            objective: HrrnObjective::Uncertainty,
            log_every: 50,
            lrscn: LrscnConfig::desk(),
            hrrn: HrrnConfig::desk(),
            hrrn_data: HrrnData::default(),
            canny: CannyParams::default(),
        }
    }

    /// Published full-scale settings (GPU-sized).
    pub fn full(stage: Stage) -> Self {
        let mut c = Self::desk(stage);
        c.lrscn = LrscnConfig::default();
        c.lrscn.backbone.input_size = 352;
        c.hrrn = HrrnConfig::default();
        c.hrrn_data = HrrnData {
            canonical_size: 1024,
            crop_size: 512,
            trimap_downscale: 1,
            trimap_grid: 1,
            band_crop_probability: 0.0,
        };
        match stage {
            Stage::Lrscn => {
                c.lr_backbone = 0.001;
                c.lr_head = 0.01;
                c.batch_size = 32;
                // 100 epochs of the 10553-image training set at batch 32
                c.steps = 100 * 10553usize.div_ceil(32);
                c.warmup_steps = 1000;
            }
            Stage::Hrrn => {
                c.lr_backbone = 0.0005;
                c.lr_head = 0.0005;
                c.batch_size = 20;
                c.steps = 10_000;
                c.warmup_steps = 500;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if self.augment.multiscale && self.augment.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("augmentation scales must be positive".into()));
        }
        let d = &self.hrrn_data;
        if d.crop_size == 0 || d.crop_size > d.canonical_size || d.trimap_grid == 0 || d.trimap_downscale == 0 {
            return Err(Error::Config(
                "crop_size must be in 1..=canonical_size; trimap_grid and trimap_downscale >= 1".into(),
            ));
        }
        if d.canonical_size / (d.trimap_downscale * d.trimap_grid) == 0 {
            return Err(Error::Config("trimap_downscale * trimap_grid exceeds canonical_size".into()));
        }
        if d.crop_size % (1 << self.hrrn.depth) != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be divisible by 2^{}",
                d.crop_size, self.hrrn.depth
            )));
        }
        self.lrscn.validate()?;
        self.hrrn.validate()
    }

    /// Parses TOML, applies `key=value` overrides (dotted keys reach nested
    /// sections) and validates. Unknown keys are rejected by name.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // start from the preset of the requested stage so partial files work
        let stage = match value.get("stage").and_then(|s| s.as_str()) {
            Some("hrrn") => Stage::Hrrn,
            _ => Stage::Lrscn,
        };
        let mut base = toml::Value::try_from(Self::desk(stage)).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        merge(&mut base, value);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for stage in [Stage::Lrscn, Stage::Hrrn] {
            for cfg in [TrainConfig::desk(stage), TrainConfig::full(stage)] {
                cfg.validate().unwrap();
                let text = cfg.to_toml().unwrap();
                assert_eq!(TrainConfig::from_toml_str(&text, &[]).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn partial_file_and_overrides() {
        let cfg = TrainConfig::from_toml_str(
            "stage = \"hrrn\"\nseed = 4\n",
            &["steps=1".into(), "hrrn.base_channels=4".into(), "objective=l1_all".into()],
        )
        .unwrap();
        assert_eq!(cfg.stage, Stage::Hrrn);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.steps, 1);
        assert_eq!(cfg.hrrn.base_channels, 4);
        assert_eq!(cfg.objective, HrrnObjective::L1All);
        assert_eq!(cfg.schedule, Schedule::WarmupCosine);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_toml_str("stepz = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
        let err = TrainConfig::from_toml_str("", &["hrrn.widthh=3".into()]).unwrap_err().to_string();
        assert!(err.contains("widthh"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::from_toml_str("steps = 0\n", &[]).is_err());
        assert!(TrainConfig::from_toml_str("momentum = 1.5\n", &[]).is_err());
    }
}
