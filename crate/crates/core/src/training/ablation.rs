//! Label-noise ablation: HRRN trained with and without the uncertainty term
//! on increasingly corrupted masks.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate_models, mix_seed, train_hrrn, train_lrscn};
use crate::checkpoint::load_model;
use crate::config::{HrrnObjective, Stage, TrainConfig};
use crate::datamodel::{corrupt_mask, synthesize_dataset, CorruptMode, DatasetRecord};
use crate::error::{Error, Result};
use crate::lrscn::Lrscn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// L1 on every pixel.
    L1,
    /// L1 on definite pixels plus the uncertainty loss.
    Uncertainty,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::L1, Arm::Uncertainty];

    pub fn objective(self) -> HrrnObjective {
        match self {
            Arm::L1 => HrrnObjective::L1All,
            Arm::Uncertainty => HrrnObjective::Uncertainty,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::L1 => "l1",
            Arm::Uncertainty => "uncertainty",
        })
    }
}

pub const METRICS: [&str; 2] = ["bde", "b_mu"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Corruption kernels; 0 trains on clean masks.
    pub kernels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub lrscn: TrainConfig,
    pub hrrn: TrainConfig,
    /// Reuse a trained LRSCN instead of training one.
    pub lrscn_checkpoint: Option<PathBuf>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            kernels: vec![3, 5, 7, 9, 11, 13],
            seeds: vec![0, 1, 2],
            data_seed: 0,
            train_count: 200,
            test_count: 20,
            image_size: 128,
            lrscn: TrainConfig::desk(Stage::Lrscn),
            hrrn: TrainConfig::desk(Stage::Hrrn),
            lrscn_checkpoint: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationFile {
    kernels: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    data_seed: Option<u64>,
    train_count: Option<usize>,
    test_count: Option<usize>,
    image_size: Option<usize>,
    lrscn_checkpoint: Option<PathBuf>,
    lrscn_train: Option<toml::Table>,
    hrrn_train: Option<toml::Table>,
}

fn stage_config(table: Option<toml::Table>, stage: &str) -> Result<TrainConfig> {
    let mut table = table.unwrap_or_default();
    table.insert("stage".into(), toml::Value::String(stage.into()));
    TrainConfig::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?, &[])
}

impl AblationConfig {
    /// Top-level keys plus `[lrscn_train]` and `[hrrn_train]` sections in the
    /// training-config format.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: AblationFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let d = Self::default();
        let cfg = Self {
            kernels: f.kernels.unwrap_or(d.kernels),
            seeds: f.seeds.unwrap_or(d.seeds),
            data_seed: f.data_seed.unwrap_or(d.data_seed),
            train_count: f.train_count.unwrap_or(d.train_count),
            test_count: f.test_count.unwrap_or(d.test_count),
            image_size: f.image_size.unwrap_or(d.image_size),
            lrscn: stage_config(f.lrscn_train, "lrscn")?,
            hrrn: stage_config(f.hrrn_train, "hrrn")?,
            lrscn_checkpoint: f.lrscn_checkpoint,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one kernel and one seed".into()));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k != 0 && (k < 3 || k % 2 == 0)) {
            return Err(Error::Config(format!("kernel {k} must be 0 or odd and >= 3")));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train_count and test_count must be positive".into()));
        }
        self.lrscn.validate()?;
        self.hrrn.validate()
    }
}

/// One `(kernel, arm, metric, seed)` measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub kernel: usize,
    pub arm: Arm,
    pub metric: &'static str,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AblationReport {
    /// Ordered by seed, kernel, arm, metric.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn value(&self, kernel: usize, arm: Arm, metric: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kernel == kernel && r.arm == arm && r.metric == metric && r.seed == seed)
            .map(|r| r.value)
    }

    /// Median over seeds; NaN entries are ignored.
    pub fn median(&self, kernel: usize, arm: Arm, metric: &str) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.kernel == kernel && r.arm == arm && r.metric == metric && !r.value.is_nan())
            .map(|r| r.value)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }

    pub fn kernels(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.rows.iter().map(|r| r.kernel).collect();
        k.sort_unstable();
        k.dedup();
        k
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Long format: `kernel,arm,metric,value,seed`.
    pub fn write_long_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kernel", "arm", "metric", "value", "seed"]).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.kernel.to_string(),
                r.arm.to_string(),
                r.metric.to_string(),
                r.value.to_string(),
                r.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `kernel,arm,metric,median`.
    pub fn write_median_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kernel", "arm", "metric", "median"]).map_err(csv_err)?;
        for k in self.kernels() {
            for arm in Arm::ALL {
                for m in METRICS {
                    let v = self.median(k, arm, m).unwrap_or(f64::NAN);
                    out.write_record([k.to_string(), arm.to_string(), m.to_string(), v.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// `kernel,seed,arm,bde,b_mu`.
    pub fn write_per_seed_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kernel", "seed", "arm", "bde", "b_mu"]).map_err(csv_err)?;
        for k in self.kernels() {
            for s in self.seeds() {
                for arm in Arm::ALL {
                    let get = |m| self.value(k, arm, m, s).unwrap_or(f64::NAN).to_string();
                    out.write_record([k.to_string(), s.to_string(), arm.to_string(), get("bde"), get("b_mu")])
                        .map_err(csv_err)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Training split with every mask corrupted by `kernel` (0 leaves it clean).
pub fn corrupt_split(records: &[DatasetRecord], kernel: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.clone();
            r.noisy_mask = match kernel {
                0 => None,
                k => Some(corrupt_mask(&r.mask, k, CorruptMode::Random, mix_seed(mix_seed(seed, k as u64), i as u64))?),
            };
            Ok(r)
        })
        .collect()
}

/// Runs the ablation; `progress` receives one line per finished arm.
pub fn ablate_noise(cfg: &AblationConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    let lrscn: Lrscn = match &cfg.lrscn_checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let train = synthesize_dataset(cfg.data_seed, cfg.train_count, cfg.image_size)?;
            let t = train_lrscn(&cfg.lrscn, &train, &mut |_| {})?;
            progress(&format!("lrscn trained in {:.0}s", t.report.seconds));
            t.model
        }
    };
    ablate_noise_with(cfg, &lrscn, progress)
}

/// The ablation with an already trained first stage, shared by every arm.
pub fn ablate_noise_with(cfg: &AblationConfig, lrscn: &Lrscn, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    let train = synthesize_dataset(cfg.data_seed, cfg.train_count, cfg.image_size)?;
    let test = synthesize_dataset(mix_seed(cfg.data_seed, 0x7E57), cfg.test_count, cfg.image_size)?;
    let canonical = cfg.hrrn.hrrn_data.canonical_size;
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        for &kernel in &cfg.kernels {
            let noisy = corrupt_split(&train, kernel, seed)?;
            for arm in Arm::ALL {
                let mut hc = cfg.hrrn.clone();
                hc.seed = seed;
                hc.objective = arm.objective();
                let trained = train_hrrn(&hc, &noisy, &mut |_| {})?;
                let (_, mean) = evaluate_models(lrscn, &trained.model, &test, canonical)?;
                let bde = mean.bde.unwrap_or(f64::NAN);
                progress(&format!(
                    "seed {seed} kernel {kernel} {arm}: bde {bde:.3} b_mu {:.4} ({:.0}s)",
                    mean.b_mu, trained.report.seconds
                ));
                for (metric, value) in [("bde", bde), ("b_mu", mean.b_mu)] {
                    report.rows.push(AblationRow {
                        kernel,
                        arm,
                        metric,
                        value,
                        seed,
                    });
                }
            }
        }
    }
    Ok(report)
}
