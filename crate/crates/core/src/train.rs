//! SGD with momentum, the interleaved training loop and batch evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use trunkshare_tensor::{Graph, TensorError};

use crate::data::{assemble_batch, ColorRanges, Dataset, Interleaver, MixPolicy, Split};
use crate::det::{Assignment, Detection, GtBox};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_map, evaluate_miou, ApMode};
use crate::model::{LossParts, LossTargets, LossWeights, Model, TaskMode};
use crate::params::{Binder, Gradients, ParamStore};
use crate::rng;
use crate::seg::SegMask;

pub const METRICS_HEADER: &str = "step,loss_total,loss_det_conf,loss_det_loc,loss_seg,miou,map";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub mix: MixPolicy,
    pub eval_every: usize,
    /// Cap on validation images per evaluation (0 = whole val split).
    pub eval_samples: usize,
    pub eval_batch: usize,
    pub ap_mode: ApMode,
    pub augment: bool,
    pub color: ColorRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            steps: 2000,
            batch_size: 8,
            loss_weights: LossWeights::default(),
            mix: MixPolicy::default(),
            eval_every: 500,
            eval_samples: 0,
            eval_batch: 16,
            ap_mode: ApMode::AllPoint,
            augment: true,
            color: ColorRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(CoreError::Config("steps, batch_size and eval_batch must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.mix.validate()?;
        self.color.validate()
    }
}

/// Momentum SGD: `v ← m·v + g`, `p ← p − lr·v`. Parameters without a gradient
/// (not reached by the loss) are left untouched, velocity included.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: IndexMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let Some(g) = g else { continue };
            if !g.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of {name}")).into());
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(
                    TensorError::Dimension(format!("gradient {:?} for parameter {name} of shape {:?}", g.shape(), p.shape())).into(),
                );
            }
        }
        for (name, g) in grads.iter() {
            let Some(g) = g else { continue };
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
            let p = params.get_mut(name).expect("checked above");
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// One metrics row; evaluation columns are filled only at evaluation steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: LossParts,
    pub miou: Option<f64>,
    pub map: Option<f64>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{},{},{},{}",
            self.step,
            self.loss.total,
            opt(self.loss.det_conf),
            opt(self.loss.det_loc),
            opt(self.loss.seg),
            opt(self.miou),
            opt(self.map)
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Evaluation result on a set of images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub miou: Option<f64>,
    pub map: Option<f64>,
    /// `(dataset sample index, detection)` pairs.
    pub detections: Vec<(usize, Detection)>,
    pub masks: Vec<(usize, SegMask)>,
}

/// Runs inference on `indices` and scores every annotation the samples carry.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
    ap_mode: ApMode,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut gt_boxes: Vec<Vec<GtBox>> = Vec::new();
    let mut local: Vec<(usize, Detection)> = Vec::new();
    let mut gt_masks = Vec::new();
    let mut pred_masks = Vec::new();
    for chunk in indices.chunks(batch.max(1)) {
        let tb = crate::data::full_batch(data, chunk)?;
        let (dets, masks) = model.predict(params, &tb.images)?;
        for (k, &idx) in chunk.iter().enumerate() {
            if let (Some(dets), Some(gt)) = (&dets, &tb.det[k]) {
                let slot = gt_boxes.len();
                gt_boxes.push(gt.clone());
                report.detections.extend(dets[k].iter().map(|d| (idx, *d)));
                local.extend(dets[k].iter().map(|d| (slot, *d)));
            }
            if let (Some(masks), Some(gt)) = (&masks, &tb.seg[k]) {
                pred_masks.push(masks[k].clone());
                gt_masks.push(gt.clone());
                report.masks.push((idx, masks[k].clone()));
            }
        }
    }
    if let Some(head) = model.det_head() {
        if !gt_boxes.is_empty() {
            report.map = Some(evaluate_map(&local, &gt_boxes, head.config().num_classes, 0.5, ap_mode)?);
        }
    }
    if let Some(head) = model.seg_head() {
        if !gt_masks.is_empty() {
            report.miou = Some(evaluate_miou(&pred_masks, &gt_masks, head.num_classes())?);
        }
    }
    Ok(report)
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.ckp1"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
}

/// Loss parts and gradients of one batch, without updating anything.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    images: &trunkshare_tensor::Tensor,
    det: &[Option<Assignment>],
    seg: &[Option<SegMask>],
    weights: LossWeights,
) -> Result<(LossParts, Gradients)> {
    let mut graph = Graph::new();
    let mut binder = Binder::new(params);
    let x = graph.input(images.clone());
    let out = model.forward(&mut graph, &mut binder, x)?;
    let det_refs: Vec<Option<&Assignment>> = det.iter().map(Option::as_ref).collect();
    let seg_refs: Vec<Option<&SegMask>> = seg.iter().map(Option::as_ref).collect();
    let loss = model.joint_loss(
        &mut graph,
        &out,
        LossTargets {
            det: &det_refs,
            seg: &seg_refs,
        },
        weights,
    )?;
    graph.backward(loss.total)?;
    Ok((loss.parts, binder.gradients(&graph)))
}

fn diverged(step: usize, e: CoreError) -> CoreError {
    match e {
        CoreError::Tensor(TensorError::NonFinite(reason)) => CoreError::Divergence { step, reason },
        other => other,
    }
}

/// Trains `params` in place. Single-task models draw only from their own stream.
/// Evaluates on the val split every `eval_every` steps and at the last step, writing
/// the metrics CSV and checkpoint at each evaluation. A non-finite loss or gradient
/// stops training with [`CoreError::Divergence`]; the previous checkpoint is kept.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(params)?;
    let mode = model.mode();
    let det_items = if mode.has_det() {
        data.det_indices(Split::Train)
    } else {
        Vec::new()
    };
    let seg_items = if mode.has_seg() {
        data.seg_indices(Split::Train)
    } else {
        Vec::new()
    };
    let mix = match mode {
        TaskMode::Multi => cfg.mix.clone(),
        TaskMode::Det => MixPolicy::WithinBatch { det_fraction: 1.0 },
        TaskMode::Seg => MixPolicy::WithinBatch { det_fraction: 0.0 },
    };
    let mut batches = Interleaver::new(det_items, seg_items, cfg.batch_size, mix, rng::derive_seed(seed, &[1]))?;
    let mut val = data.split_indices(Split::Val);
    if cfg.eval_samples > 0 {
        val.truncate(cfg.eval_samples);
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let items = batches.next().expect("interleaver is endless");
        let aug_seed = rng::derive_seed(seed, &[2, step as u64]);
        let batch = assemble_batch(data, &items, cfg.augment.then_some((&cfg.color, aug_seed)))?;
        let assigns = batch
            .det
            .iter()
            .map(|g| g.as_ref().map(|g| model.assign(g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let (parts, grads) =
            batch_gradients(model, params, &batch.images, &assigns, &batch.seg, cfg.loss_weights).map_err(|e| diverged(step, e))?;
        if !parts.total.is_finite() {
            return Err(CoreError::Divergence {
                step,
                reason: format!("loss {}", parts.total),
            });
        }
        sgd.step(params, &grads).map_err(|e| diverged(step, e))?;
        let mut record = MetricsRecord {
            step,
            loss: parts,
            ..MetricsRecord::default()
        };
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps {
            if !val.is_empty() {
                let report = evaluate(model, params, data, &val, cfg.eval_batch, cfg.ap_mode).map_err(|e| diverged(step, e))?;
                record.miou = report.miou;
                record.map = report.map;
            }
            records.push(record);
            if let Some(out) = outputs {
                fs::write(&out.metrics, metrics_csv(&records))?;
                params.save(&out.checkpoint)?;
            }
            continue;
        }
        records.push(record);
    }
    Ok(TrainOutcome { records })
}

/// Mean total loss over consecutive windows of `window` records.
pub fn windowed_means(records: &[MetricsRecord], window: usize) -> Vec<f64> {
    records
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().map(|r| r.loss.total).sum::<f64>() / c.len() as f64)
        .collect()
}
