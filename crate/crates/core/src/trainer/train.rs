//! The training loop, evaluation and bit-width decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{class_weights, decay_sequence, sgd_momentum_step, DecaySchedule, TrainConfig};
use crate::dataset::{accumulate_confusion, augment, mean_iou, Augment, ConfusionMatrix, Dataset, LabelMap, SegSample};
use crate::error::{Error, Result};
use crate::graph::{compute_gradients, predict, BitWidths, ConvBackend, ForwardOptions, SegNet};
use crate::quantize::is_full_precision;
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Consecutive non-finite losses that abort a run.
const DIVERGENCE_PATIENCE: usize = 10;
const BN_MOMENTUM: f64 = 0.1;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub bits: BitWidths,
    pub scales: Vec<usize>,
    pub loss: f64,
    pub lr: f64,
}

/// Per-iteration training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iter\tbits\tscales\tloss\tlr\n");
        for e in &self.entries {
            let scales: Vec<String> = e.scales.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{}", e.iter, e.bits, scales.join(","), e.loss, e.lr);
        }
        s
    }

    /// Mean loss over the last `n` entries.
    pub fn recent_loss(&self, n: usize) -> f64 {
        let tail = &self.entries[self.entries.len().saturating_sub(n)..];
        tail.iter().map(|e| e.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

pub(crate) fn stack_batch(samples: &[&SegSample]) -> Result<(Tensor, Vec<LabelMap>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok((Tensor::stack(&images)?, samples.iter().map(|s| s.labels.clone()).collect()))
}

/// Endless shuffled pass over `n` indices, reshuffled every epoch.
pub(crate) struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchOrder {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut b = BatchOrder { order: (0..n).collect(), pos: n, rng: rng_for(seed, "batch", 0) };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains `net` at its current bit-widths for `cfg.iters` iterations.
///
/// `velocity` carries momentum across calls; entries are appended to `log`
/// with iteration numbers offset by its current length.
pub fn train(
    net: &mut SegNet,
    data: &Dataset,
    cfg: &TrainConfig,
    velocity: &mut BTreeMap<String, Tensor>,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if data.num_classes != net.num_classes {
        return Err(Error::BadConfig(format!(
            "dataset has {} classes, net predicts {}",
            data.num_classes, net.num_classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::BadConfig("empty training split".into()));
    }
    let weights = class_weights(&data.class_frequencies(), cfg.class_weight_c)?;
    let strides: Vec<usize> = {
        let mut s: Vec<usize> = net.scales.iter().map(|(s, _)| *s).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    };
    let starts = cfg.stage_starts(strides.len());
    let base = log.entries.len();
    let mut order = BatchOrder::new(data.train.len(), cfg.seed ^ base as u64);
    let mut aug_rng = rng_for(cfg.seed, "augment", base as u64);
    let bits = net.body_bits();
    let opts = ForwardOptions::train();
    let mut bad = 0;
    for it in 0..cfg.iters {
        let scales: Vec<usize> = strides.iter().zip(&starts).filter(|(_, &s)| it >= s).map(|(st, _)| *st).collect();
        let mirrored: Vec<SegSample>;
        let picked: Vec<&SegSample> = order.next(cfg.batch).into_iter().map(|i| &data.train[i]).collect();
        let batch: Vec<&SegSample> = if cfg.augment {
            mirrored = picked
                .iter()
                .map(|s| if aug_rng.gen_bool(0.5) { augment(s, 0, Augment::Reflect) } else { Ok((*s).clone()) })
                .collect::<Result<_>>()?;
            mirrored.iter().collect()
        } else {
            picked
        };
        let (x, labels) = stack_batch(&batch)?;
        let (loss, grads, stats) = compute_gradients(net, &x, &labels, &scales, &weights, &opts)?;
        let lr = cfg.lr_at(it);
        log.entries.push(LogEntry { iter: base + it, bits, scales, loss, lr });
        let finite = loss.is_finite() && grads.values().all(|g| g.data.iter().all(|v| v.is_finite()));
        if !finite {
            bad += 1;
            if bad >= DIVERGENCE_PATIENCE {
                return Err(Error::DivergenceDetected { iter: base + it });
            }
            continue;
        }
        bad = 0;
        sgd_momentum_step(&mut net.params, &grads, velocity, lr, cfg.momentum)?;
        net.update_running_stats(&stats, BN_MOMENTUM);
    }
    Ok(())
}

/// Confusion matrix of finest-scale predictions against labels downsampled
/// to the same grid.
pub fn evaluate(net: &SegNet, samples: &[SegSample], backend: ConvBackend) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.num_classes);
    let stride = net.finest_stride();
    for chunk in samples.chunks(EVAL_BATCH) {
        let (x, labels) = stack_batch(&chunk.iter().collect::<Vec<_>>())?;
        for (pred, truth) in predict(net, &x, backend)?.iter().zip(&labels) {
            if truth.data.iter().any(|&l| l as usize >= net.num_classes && l != crate::dataset::IGNORE_LABEL) {
                return Err(Error::BadLabels(format!("labels exceed {} classes", net.num_classes)));
            }
            accumulate_confusion(pred, &truth.downsample(stride), &mut cm)?;
        }
    }
    Ok(cm)
}

pub(crate) fn val_miou(net: &SegNet, data: &Dataset) -> Result<f64> {
    mean_iou(&evaluate(net, &data.val, ConvBackend::Float)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayStep {
    pub bits: BitWidths,
    /// Mean loss over the last tenth of the step.
    pub train_loss: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecayReport {
    pub steps: Vec<DecayStep>,
    pub log: TrainLog,
    pub velocity: BTreeMap<String, Tensor>,
}

impl DecayReport {
    pub fn final_miou(&self) -> Option<f64> {
        self.steps.last().map(|s| s.val_miou)
    }
}

/// Quantizes every non-first layer to each bit-width of the schedule in turn
/// and fine-tunes at each, recording loss and validation mIoU per step.
pub fn run_bit_width_decay(
    net: &mut SegNet,
    sched: &DecaySchedule,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<DecayReport> {
    let steps: Vec<BitWidths> = decay_sequence(sched)?.into_iter().map(BitWidths::uniform).collect();
    run_decay_steps(net, &steps, sched.fine_tune_iters, data, cfg)
}

/// Decay towards a possibly unequal target: both sides follow the schedule
/// down to `min(k_w, k_a)` but never go below their own target.
pub fn decay_steps(sched: &DecaySchedule, target: BitWidths) -> Result<Vec<BitWidths>> {
    if is_full_precision(target.k_w) || is_full_precision(target.k_a) {
        return Err(Error::BadSchedule(format!("cannot decay to {target}")));
    }
    let floor = DecaySchedule { target: target.k_w.min(target.k_a), ..*sched };
    let mut steps: Vec<BitWidths> =
        decay_sequence(&floor)?.into_iter().map(|k| BitWidths::new(k.max(target.k_w), k.max(target.k_a))).collect();
    steps.dedup();
    Ok(steps)
}

pub(crate) fn run_decay_steps(
    net: &mut SegNet,
    steps: &[BitWidths],
    fine_tune_iters: usize,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<DecayReport> {
    let mut report = DecayReport::default();
    let step_cfg = cfg.all_scales(fine_tune_iters);
    for (t, &bits) in steps.iter().enumerate() {
        net.set_bit_widths(bits)?;
        let step_cfg = TrainConfig { seed: cfg.seed.wrapping_add(t as u64), ..step_cfg.clone() };
        train(net, data, &step_cfg, &mut report.velocity, &mut report.log)?;
        report.steps.push(DecayStep {
            bits,
            train_loss: report.log.recent_loss((fine_tune_iters / 10).max(1)),
            val_miou: val_miou(net, data)?,
        });
    }
    Ok(report)
}
