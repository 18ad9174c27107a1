//! Target assignment, the three-part detection loss and the training loop.

mod loss;
mod optim;
mod targets;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pavescan_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{ciou, compute_loss, LossBreakdown, LossConfig, LossOutput};
pub use optim::{cosine_lr, Optimizer, OptimizerKind};
pub use targets::{assign_targets, shape_ratio, Positive, ScaleTargets, Targets, ANCHOR_THRESHOLD};

use crate::checkpoint::Checkpoint;
use crate::data::{decode_image, image_to_tensor, letterbox, DatasetManifest, LabelRecord};
use crate::detector::{decode_candidates, Detector, RawPrediction};
use crate::error::{io_err, Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport, GroundTruth, ImageEval};
use crate::layers::BN_MOMENTUM;
use crate::params::{apply_bn_stats, Mode, Session};
use crate::pipeline::postprocess;

/// One network-ready image with labels in network-input normalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<LabelRecord>,
}

impl Sample {
    pub fn ground_truth(&self, size: usize) -> Vec<GroundTruth> {
        let s = size as f64;
        self.labels
            .iter()
            .filter_map(|r| r.to_box(s, s).ok().map(|bbox| GroundTruth { bbox, class_id: r.class_id }))
            .collect()
    }

    /// Mirror image and labels left to right.
    pub fn flipped(&self) -> Sample {
        let shape = self.image.shape().to_vec();
        let w = shape[2];
        let src = self.image.data();
        let data = (0..src.len()).map(|i| src[i - i % w + (w - 1 - i % w)]).collect();
        Sample {
            image: Tensor::new(shape, data).expect("same shape"),
            labels: self.labels.iter().map(|r| LabelRecord { cx: 1.0 - r.cx, ..*r }).collect(),
        }
    }
}

/// Loads and letterboxes every manifest entry.
pub fn load_samples(manifest: &DatasetManifest, size: usize) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = manifest.image_path(e);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let img = decode_image(&bytes, &path.display().to_string())?;
            let (w, h) = (img.width() as f64, img.height() as f64);
            let (boxed, t) = letterbox(&img, size);
            let s = size as f64;
            let labels = manifest
                .labels(e)?
                .iter()
                .map(|r| {
                    let b = t.forward_box(&r.to_box(w, h)?)?;
                    Ok(LabelRecord::from_box(r.class_id, &b, s, s))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                image: image_to_tensor(&boxed),
                labels,
            })
        })
        .collect()
}

/// Stacks `[3, S, S]` images into `[N, 3, S, S]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty batch".into()))?.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for im in images {
        if im.shape() != first.as_slice() {
            return Err(Error::Invalid("images in a batch must share a shape".into()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(first);
    Ok(Tensor::new(shape, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub final_lr_fraction: f64,
    /// Linear learning-rate warmup length in epochs.
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub seed: u64,
    pub shuffle: bool,
    pub flip_prob: f64,
    /// Multiply the objective by the batch size before backprop.
    pub batch_scaled_objective: bool,
    pub eval_conf: f64,
    pub eval_nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            final_lr_fraction: 0.01,
            warmup_epochs: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            optimizer: OptimizerKind::Sgd,
            loss: LossConfig::default(),
            seed: 0,
            shuffle: true,
            flip_prob: 0.5,
            batch_scaled_objective: true,
            eval_conf: 0.01,
            eval_nms_iou: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) || !(self.warmup_epochs >= 0.0) {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        self.loss.validate(scales)
    }

    /// Learning rate at global iteration `it` out of `total`.
    pub fn lr_at(&self, it: usize, total: usize, per_epoch: usize) -> f64 {
        let base = cosine_lr(self.lr, self.final_lr_fraction, it, total);
        let warm = (self.warmup_epochs * per_epoch as f64).round() as usize;
        if warm > 0 && it < warm {
            base * (it + 1) as f64 / warm as f64
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: LossBreakdown,
}

/// Per-epoch loss records and validation mAP@0.5.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub val_map: Vec<f64>,
}

impl History {
    /// Whitespace-separated table: `epoch split box obj cls total`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch split box obj cls total\n");
        for r in &self.records {
            let l = &r.loss;
            let _ = writeln!(s, "{} {} {:.6} {:.6} {:.6} {:.6}", r.epoch, r.split, l.box_loss, l.obj, l.cls, l.total);
        }
        s
    }

    pub fn split(&self, split: &str) -> Vec<LossBreakdown> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }
}

/// Trailing moving average with a window of up to `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub val_map: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub struct FitReport {
    pub history: History,
    pub best_epoch: usize,
    pub best_map: f64,
    pub best: Checkpoint,
    pub last_report: Option<EvalReport>,
}

fn add_weighted(acc: &mut [f64; 3], l: &LossBreakdown, w: f64) {
    acc[0] += l.box_loss * w;
    acc[1] += l.obj * w;
    acc[2] += l.cls * w;
}

fn check_finite(l: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    for (component, v) in l.components() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch, component });
        }
    }
    if !l.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch,
            component: "total",
        });
    }
    Ok(())
}

/// Runs one optimisation step on `batch`; returns its loss.
pub fn train_step(
    det: &mut Detector<f32>,
    opt: &mut Optimizer<f32>,
    batch: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    batch_index: usize,
) -> Result<LossBreakdown> {
    let images = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let labels: Vec<Vec<LabelRecord>> = batch.iter().map(|s| s.labels.clone()).collect();
    let targets = assign_targets(&labels, det.config(), cfg.loss.anchor_threshold)?;
    let tape = Tape::new();
    let (grads, stats, breakdown) = {
        let mut s = Session::new(&tape, det.params(), Mode::Train, true);
        let x = tape.constant(images);
        let raw = det.forward(&mut s, x)?;
        let out = compute_loss(&tape, &raw, &targets, det.config(), &cfg.loss)?;
        check_finite(&out.breakdown, epoch, batch_index)?;
        let objective = if cfg.batch_scaled_objective {
            tape.scale(out.total, batch.len() as f32)
        } else {
            out.total
        };
        tape.backward(objective)?;
        let grads: Vec<Option<Tensor<f32>>> = s.vars().iter().map(|&v| tape.grad(v)).collect();
        (grads, s.take_bn_stats(), out.breakdown)
    };
    opt.step(det.params_mut(), &grads, lr);
    apply_bn_stats(det.params_mut(), &stats, BN_MOMENTUM as f32);
    Ok(breakdown)
}

/// Validation pass: mean loss (eval-mode batch norm) and detections.
pub fn validate(
    det: &Detector<f32>,
    samples: &[Sample],
    batch_size: usize,
    loss_cfg: &LossConfig,
    conf: f64,
    nms_iou: f64,
) -> Result<(LossBreakdown, Vec<ImageEval>)> {
    let size = det.config().input_size;
    let mut acc = [0.0; 3];
    let mut images = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let mut s = Session::new(&tape, det.params(), Mode::Eval, false);
        let x = tape.constant(batch);
        let raw = det.forward(&mut s, x)?;
        let labels: Vec<Vec<LabelRecord>> = chunk.iter().map(|s| s.labels.clone()).collect();
        let targets = assign_targets(&labels, det.config(), loss_cfg.anchor_threshold)?;
        let out = compute_loss(&tape, &raw, &targets, det.config(), loss_cfg)?;
        add_weighted(&mut acc, &out.breakdown, chunk.len() as f64);
        let pred = RawPrediction {
            scales: raw.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        for (sample, cands) in chunk.iter().zip(decode_candidates(&pred, det.config(), conf)?) {
            images.push(ImageEval {
                detections: postprocess(cands, nms_iou)?.into_iter().map(|c| c.detection).collect(),
                ground_truth: sample.ground_truth(size),
            });
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((LossBreakdown::new(acc[0] / n, acc[1] / n, acc[2] / n, loss_cfg), images))
}

/// Trains `det` in place. The returned checkpoint holds the weights of the
/// epoch with the best validation mAP@0.5 (the last epoch without a
/// validation set).
pub fn fit(
    det: &mut Detector<f32>,
    train: &[Sample],
    val: &[Sample],
    class_names: &[String],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    cfg.validate(det.config().num_scales)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_iters = per_epoch * cfg.epochs;
    let mut history = History::default();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut last_report = None;
    let mut it = 0;
    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut acc = [0.0; 3];
        let mut lr = cfg.lr;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
                        train[i].flipped()
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            lr = cfg.lr_at(it, total_iters, per_epoch);
            let l = train_step(det, &mut opt, &batch, cfg, lr, epoch, b)?;
            add_weighted(&mut acc, &l, batch.len() as f64);
            it += 1;
        }
        let n = train.len() as f64;
        let train_loss = LossBreakdown::new(acc[0] / n, acc[1] / n, acc[2] / n, &cfg.loss);
        history.records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: train_loss,
        });
        let (val_loss, val_map) = if val.is_empty() {
            (None, None)
        } else {
            let (vl, images) = validate(det, val, cfg.batch_size, &cfg.loss, cfg.eval_conf, cfg.eval_nms_iou)?;
            history.records.push(EpochRecord {
                epoch,
                split: "val".into(),
                loss: vl,
            });
            let report = evaluate(&images, class_names, &EvalOptions::default()).ok();
            let map = report.as_ref().map_or(0.0, |r| r.map);
            history.val_map.push(map);
            last_report = report;
            (Some(vl), Some(map))
        };
        let score = val_map.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(_, m, _)| score > *m || (val.is_empty())) {
            let mut meta = BTreeMap::new();
            meta.insert("epoch".to_string(), epoch.to_string());
            meta.insert("seed".to_string(), cfg.seed.to_string());
            if let Some(m) = val_map {
                meta.insert("val_map50".to_string(), format!("{m:.6}"));
            }
            best = Some((epoch, score, Checkpoint::from_detector(det, class_names.to_vec(), meta)));
        }
        on_epoch(&EpochSummary {
            epoch,
            train: train_loss,
            val: val_loss,
            val_map,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_map, best) = best.expect("at least one epoch");
    Ok(FitReport {
        history,
        best_epoch,
        best_map: best_map.max(0.0),
        best,
        last_report,
    })
}

/// Detection metrics of a model on loaded samples.
pub fn evaluate_samples(
    det: &Detector<f32>,
    samples: &[Sample],
    class_names: &[String],
    conf: f64,
    nms_iou: f64,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let (_, images) = validate(det, samples, 16, &LossConfig::default(), conf, nms_iou)?;
    evaluate(&images, class_names, opts)
}
