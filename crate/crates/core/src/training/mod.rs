//! Optimization loops for both stages and the label-noise ablation.

mod ablation;
mod data;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Model};
use crate::config::{HrrnObjective, Stage, TrainConfig};
use crate::datamodel::DatasetRecord;
use crate::error::{Error, Result};
use crate::hrrn::{inputs_to_tensor, Hrrn};
use crate::losses::{l1_definite_grad, saliency_loss_grad, trimap_ce_grad, uncertainty_grad, SsimConfig};
use crate::lrscn::{images_to_tensor, saliency_plane, Lrscn};
use crate::metrics::{evaluate_pair, mean_row, MetricRow};
use crate::nn::optim::Sgd;
use crate::nn::{Graph, ParamGroup, Tensor};
use crate::raster::{Image, SaliencyMap, TRIMAP_BACKGROUND};
use crate::tiling::run_pipeline;

pub use ablation::{ablate_noise, ablate_noise_with, corrupt_split, AblationConfig, AblationReport, AblationRow, Arm};
pub use data::{mix_seed, BatchSampler};

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    /// Set when no pixel received supervision during the whole run.
    pub degenerate: bool,
    pub seconds: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|l| l.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|l| l.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// A trained network with the state needed to checkpoint it.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub optimizer: Sgd,
    pub report: TrainReport,
    pub config: TrainConfig,
}

impl<M: Model> Trained<M> {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta {
            step: self.report.log.last().map(|l| l.step + 1).unwrap_or(0),
            train_config: serde_json::to_value(&self.config).ok(),
            ..Default::default()
        };
        if let Some(l) = self.report.final_loss(50) {
            meta.metrics.insert("final_loss".into(), l);
        }
        if let Some(l) = self.report.initial_loss() {
            meta.metrics.insert("initial_loss".into(), l);
        }
        Checkpoint::from_model(&self.model, Some(&self.optimizer), meta)
    }
}

pub type Observer<'a> = &'a mut dyn FnMut(&StepLog);

fn check_stage(cfg: &TrainConfig, stage: Stage, data: &[DatasetRecord]) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {:?}, not {stage:?}", cfg.stage)));
    }
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    Ok(())
}

fn rates(cfg: &TrainConfig, step: usize) -> (f64, f64) {
    let f = cfg.schedule.factor(step, cfg.steps, cfg.warmup_steps);
    (cfg.lr_backbone * f, cfg.lr_head * f)
}

fn plane_seed(shape: [usize; 4], n: usize, grad: &[f64], scale: f64, seed: &mut Tensor) {
    debug_assert_eq!(seed.shape, shape);
    let len = seed.sample_len();
    for (d, g) in seed.data[n * len..(n + 1) * len].iter_mut().zip(grad) {
        *d = g * scale;
    }
}

fn finite_or_diverged(step: usize, loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} loss is {loss}"),
        })
    }
}

/// Trains the low-resolution network from a fresh initialization.
pub fn train_lrscn(cfg: &TrainConfig, data: &[DatasetRecord], observer: Observer) -> Result<Trained<Lrscn>> {
    check_stage(cfg, Stage::Lrscn, data)?;
    let model = Lrscn::new(cfg.lrscn.clone(), mix_seed(cfg.seed, 1))?;
    let optimizer = Sgd::new(cfg.momentum, cfg.weight_decay);
    continue_lrscn(model, optimizer, cfg, data, observer)
}

/// Runs `cfg.steps` LRSCN steps starting from the given state.
pub fn continue_lrscn(
    mut model: Lrscn,
    mut optimizer: Sgd,
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    observer: Observer,
) -> Result<Trained<Lrscn>> {
    check_stage(cfg, Stage::Lrscn, data)?;
    let start = Instant::now();
    let ssim = SsimConfig::default();
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = data::lrscn_batch(cfg, data, &mut sampler, step)?;
        let b = batch.images.len();
        let mut g = Graph::new();
        let refs: Vec<&Image> = batch.images.iter().collect();
        let x = g.input(images_to_tensor(&refs)?);
        let vars = model.forward_graph(&mut g, x)?;

        let mut seeds: Vec<Tensor> = vars.levels.iter().map(|&v| Tensor::zeros(g.shape(v))).collect();
        let mut logit_seed = Tensor::zeros(g.shape(vars.trimap_logits));
        let (mut sal_total, mut ce_total) = (0.0, 0.0);
        for n in 0..b {
            let levels: Vec<(SaliencyMap, _)> = vars
                .levels
                .iter()
                .map(|&v| (saliency_plane(g.value(v), n), batch.masks[n].clone()))
                .collect();
            let (sl, grads) = saliency_loss_grad(&levels, &ssim)?;
            for (l, grad) in grads.iter().enumerate() {
                let shape = seeds[l].shape;
                plane_seed(shape, n, grad, 1.0 / b as f64, &mut seeds[l]);
            }
            let logits = g.value(vars.trimap_logits);
            let labels = batch.trimaps[n].resize_nearest(logits.h(), logits.w());
            let (cl, cg) = trimap_ce_grad(logits.sample(n), labels.as_slice())?;
            plane_seed(logit_seed.shape, n, &cg, 1.0 / b as f64, &mut logit_seed);
            sal_total += sl.value;
            ce_total += cl.value;
        }
        let (sal, ce) = (sal_total / b as f64, ce_total / b as f64);
        let loss = sal + ce;
        finite_or_diverged(step, loss, "LRSCN")?;

        let mut seed_list: Vec<_> = vars.levels.iter().copied().zip(seeds).collect();
        seed_list.push((vars.trimap_logits, logit_seed));
        let grads = g.backward(seed_list);
        let (lr_b, lr_h) = rates(cfg, step);
        optimizer.step(&mut model.store, &grads.params(), |grp| match grp {
            ParamGroup::Backbone => lr_b,
            _ => lr_h,
        });

        let entry = StepLog {
            step,
            loss,
            components: BTreeMap::from([("saliency".into(), sal), ("trimap".into(), ce)]),
            lr_backbone: lr_b,
            lr_head: lr_h,
        };
        log_progress(cfg, &entry);
        observer(&entry);
        report.log.push(entry);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(Trained {
        model,
        optimizer,
        report,
        config: cfg.clone(),
    })
}

fn log_progress(cfg: &TrainConfig, e: &StepLog) {
    if cfg.log_every > 0 && (e.step % cfg.log_every == 0 || e.step + 1 == cfg.steps) {
        let parts: Vec<String> = e.components.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log::info!(
            "{:?} step {}/{} loss {:.4} ({}) lr {:.2e}",
            cfg.stage,
            e.step + 1,
            cfg.steps,
            e.loss,
            parts.join(" "),
            e.lr_head
        );
    }
}

/// Trains the refinement network from a fresh initialization.
pub fn train_hrrn(cfg: &TrainConfig, data: &[DatasetRecord], observer: Observer) -> Result<Trained<Hrrn>> {
    check_stage(cfg, Stage::Hrrn, data)?;
    let model = Hrrn::new(cfg.hrrn.clone(), mix_seed(cfg.seed, 2))?;
    let optimizer = Sgd::new(cfg.momentum, cfg.weight_decay);
    continue_hrrn(model, optimizer, cfg, data, observer)
}

pub fn continue_hrrn(
    mut model: Hrrn,
    mut optimizer: Sgd,
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    observer: Observer,
) -> Result<Trained<Hrrn>> {
    check_stage(cfg, Stage::Hrrn, data)?;
    let start = Instant::now();
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut report = TrainReport::default();
    let mut supervised = 0usize;
    for step in 0..cfg.steps {
        let batch = data::hrrn_batch(cfg, data, &mut sampler, step)?;
        let b = batch.inputs.len();
        let mut g = Graph::new();
        let x = g.input(inputs_to_tensor(&batch.inputs)?);
        let (vars, norms) = model.forward_graph_train(&mut g, x)?;
        let mut s_seed = Tensor::zeros(g.shape(vars.saliency));
        let mut lv_seed = Tensor::zeros(g.shape(vars.logvar));
        let (mut l1_total, mut unc_total) = (0.0, 0.0);
        for n in 0..b {
            let s = g.value(vars.saliency).sample(n);
            let lv = g.value(vars.logvar).sample(n);
            let gt = batch.masks[n].to_saliency();
            let labels = batch.inputs[n].trimap.as_slice();
            let (l1, mut gs) = match cfg.objective {
                HrrnObjective::L1All => l1_definite_grad(s, gt.as_slice(), &vec![TRIMAP_BACKGROUND; s.len()])?,
                _ => l1_definite_grad(s, gt.as_slice(), labels)?,
            };
            supervised += l1.pixel_count;
            l1_total += l1.value;
            if cfg.objective == HrrnObjective::Uncertainty {
                let (u, gu, glv) = uncertainty_grad(s, gt.as_slice(), lv, labels)?;
                supervised += u.pixel_count;
                unc_total += u.value;
                gs.iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
                plane_seed(lv_seed.shape, n, &glv, 1.0 / b as f64, &mut lv_seed);
            }
            plane_seed(s_seed.shape, n, &gs, 1.0 / b as f64, &mut s_seed);
        }
        let (l1, unc) = (l1_total / b as f64, unc_total / b as f64);
        let loss = l1 + unc;
        finite_or_diverged(step, loss, "HRRN")?;

        let mut seeds = vec![(vars.saliency, s_seed)];
        if cfg.objective == HrrnObjective::Uncertainty {
            seeds.push((vars.logvar, lv_seed));
        }
        let grads = g.backward(seeds);
        let (lr_b, lr_h) = rates(cfg, step);
        optimizer.step(&mut model.store, &grads.params(), |_| lr_h);
        model.update_running_statistics(&g, &norms);
        model.power_iterate(1);

        let mut components = BTreeMap::from([("l1".to_string(), l1)]);
        if cfg.objective == HrrnObjective::Uncertainty {
            components.insert("uncertainty".into(), unc);
        }
        let entry = StepLog {
            step,
            loss,
            components,
            lr_backbone: lr_b,
            lr_head: lr_h,
        };
        log_progress(cfg, &entry);
        observer(&entry);
        report.log.push(entry);
    }
    if supervised == 0 {
        log::warn!("no pixel was supervised during HRRN training; the run learned nothing");
        report.degenerate = true;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(Trained {
        model,
        optimizer,
        report,
        config: cfg.clone(),
    })
}

/// Per-image metrics of the full pipeline on `records`, plus their mean.
pub fn evaluate_models(
    lrscn: &Lrscn,
    hrrn: &Hrrn,
    records: &[DatasetRecord],
    canonical_size: usize,
) -> Result<(Vec<MetricRow>, MetricRow)> {
    let rows = records
        .iter()
        .map(|r| {
            let out = run_pipeline(&r.image, lrscn, hrrn, canonical_size)?;
            Ok(evaluate_pair(&r.identifier, &out.saliency, &r.mask)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_row(&rows);
    Ok((rows, mean))
}
