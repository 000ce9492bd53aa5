//! Initialization routes and end-to-end experiments.
//!
//! * `P1`: full-precision extractor → full-precision FCN → quantize to the
//!   target directly.
//! * `P1With8Bit`: as `P1`, but quantize to 8 bits first and decay from there.
//! * `P2`: low bit-width extractor → FCN trained at the target bit-width.
//!
//! Extractors are pretrained on a multi-label "which classes are present"
//! task using the global average of the coarsest logits.

use std::collections::BTreeMap;

use super::train::{decay_steps, run_decay_steps, stack_batch, train, val_miou, BatchOrder};
use super::{sgd_momentum_step, DecayReport, DecaySchedule, TrainConfig, TrainLog};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{backward, build_toy_bfcn, forward, BitWidths, ForwardOptions, NetConfig, SegNet, EXTRACTOR_LAYERS};
use crate::quantize::is_full_precision;
use crate::seed::sub_seed;
use crate::tensor::Tensor;

const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    P1,
    P2,
    P1With8Bit,
}

impl Route {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p1" => Ok(Route::P1),
            "p2" => Ok(Route::P2),
            "p1-8bit" => Ok(Route::P1With8Bit),
            other => Err(Error::BadConfig(format!("unknown route {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Route::P1 => "p1",
            Route::P2 => "p2",
            Route::P1With8Bit => "p1-8bit",
        }
    }

    /// Quantization schedule applied after full-precision training; `None`
    /// for `P2`, which trains at the target bit-width from the start.
    /// `decay_rate = None` jumps directly to the target.
    pub fn decay_schedule(self, target: u32, decay_rate: Option<u32>, fine_tune_iters: usize) -> Option<DecaySchedule> {
        match self {
            Route::P2 => None,
            Route::P1 => Some(DecaySchedule::new(target, 1, target, fine_tune_iters)),
            Route::P1With8Bit => Some(match decay_rate {
                Some(r) => DecaySchedule::new(8, r, target, fine_tune_iters),
                None => DecaySchedule::direct(8, target, fine_tune_iters),
            }),
        }
    }
}

/// Pretrained networks a route starts from, plus a cached full-precision FCN
/// shared by runs of the same network configuration.
#[derive(Clone, Debug, Default)]
pub struct RouteAssets {
    pub fp_extractor: Option<SegNet>,
    pub lowbit_extractor: Option<SegNet>,
    pub fp_fcn: Option<SegNet>,
}

/// Fresh network at `net_cfg`'s bit-widths (full precision for the P1
/// routes) whose extractor layers come from the route's pretrained asset.
pub fn init_route(route: Route, assets: &RouteAssets, net_cfg: &NetConfig, init_seed: u64) -> Result<SegNet> {
    let (source, bits, what) = match route {
        Route::P1 | Route::P1With8Bit => (&assets.fp_extractor, BitWidths::FULL, "full-precision extractor"),
        Route::P2 => (&assets.lowbit_extractor, net_cfg.bits, "low bit-width extractor"),
    };
    let source = source.as_ref().ok_or_else(|| Error::MissingAsset(what.into()))?;
    let mut net = build_toy_bfcn(&NetConfig { bits, ..*net_cfg }, init_seed)?;
    net.copy_from(source, &EXTRACTOR_LAYERS)?;
    Ok(net)
}

/// Trains a network at `bits` on image-level class presence.
pub fn pretrain_extractor(data: &Dataset, net_cfg: &NetConfig, bits: BitWidths, cfg: &TrainConfig) -> Result<SegNet> {
    cfg.validate()?;
    let mut net = build_toy_bfcn(&NetConfig { bits, ..*net_cfg }, sub_seed(cfg.seed, "init", 1))?;
    let coarse = net.scales.iter().map(|(s, _)| *s).max().expect("net has scales");
    let opts = ForwardOptions::train().with_scales(&[coarse]);
    let mut velocity = BTreeMap::new();
    let mut order = BatchOrder::new(data.train.len(), sub_seed(cfg.seed, "pretrain", 0));
    let mut bad = 0;
    for it in 0..cfg.iters {
        let picked: Vec<_> = order.next(cfg.batch).into_iter().map(|i| &data.train[i]).collect();
        let (x, labels) = stack_batch(&picked)?;
        let fwd = forward(&net, &x, &opts)?;
        let z = &fwd.logits[&coarse];
        let [n, c, h, w] = z.shape;
        let mut dz = Tensor::zeros(z.shape);
        let mut loss = 0.0;
        for (b, l) in labels.iter().enumerate() {
            let mut present = vec![false; c];
            l.data.iter().filter(|&&v| (v as usize) < c).for_each(|&v| present[v as usize] = true);
            for (ch, &t) in present.iter().enumerate() {
                let start = (b * c + ch) * h * w;
                let s = z.data[start..start + h * w].iter().sum::<f64>() / (h * w) as f64;
                let t = t as u8 as f64;
                // Binary cross-entropy on logit s, in a numerically stable form.
                loss += (s.max(0.0) - s * t + (-s.abs()).exp().ln_1p()) / (n * c) as f64;
                let g = (1.0 / (1.0 + (-s).exp()) - t) / (n * c * h * w) as f64;
                dz.data[start..start + h * w].iter_mut().for_each(|v| *v = g);
            }
        }
        if !loss.is_finite() {
            bad += 1;
            if bad >= DIVERGENCE_PATIENCE {
                return Err(Error::DivergenceDetected { iter: it });
            }
            continue;
        }
        bad = 0;
        let grads = backward(&net, &fwd, &BTreeMap::from([(coarse, dz)]))?;
        sgd_momentum_step(&mut net.params, &grads, &mut velocity, cfg.lr_at(it), cfg.momentum)?;
        net.update_running_stats(&fwd.batch_stats, 0.1);
    }
    Ok(net)
}

/// One route from scratch to a trained network at the target bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    /// Architecture; `bits` is the target bit-width.
    pub net: NetConfig,
    pub route: Route,
    /// Bits removed per decay step; `None` quantizes directly.
    pub decay_rate: Option<u32>,
    pub pretrain_iters: usize,
    /// Iterations of FCN training (full precision for P1 routes).
    pub fcn_iters: usize,
    /// Iterations per decay step.
    pub fine_tune_iters: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub net: SegNet,
    pub fcn_log: TrainLog,
    pub decay: Option<DecayReport>,
    /// Bit-widths the body was trained at, in order.
    pub bit_sequence: Vec<BitWidths>,
    pub val_miou: f64,
}

impl ExperimentReport {
    /// FCN log followed by the decay log.
    pub fn full_log(&self) -> TrainLog {
        let mut log = self.fcn_log.clone();
        if let Some(d) = &self.decay {
            let base = log.entries.len();
            log.entries.extend(d.log.entries.iter().cloned().map(|mut e| {
                e.iter += base;
                e
            }));
        }
        log
    }
}

/// Runs pretraining, FCN training and quantization per `exp.route`, reusing
/// and filling `assets`.
pub fn run_experiment(exp: &Experiment, data: &Dataset, assets: &mut RouteAssets) -> Result<ExperimentReport> {
    let target = exp.net.bits;
    if is_full_precision(target.k_w) != is_full_precision(target.k_a) {
        return Err(Error::BadConfig(format!("cannot mix full precision and quantized sides: {target}")));
    }
    let pre_cfg = TrainConfig { iters: exp.pretrain_iters, ..exp.train.clone() };
    let init_seed = sub_seed(exp.train.seed, "init", 0);
    let fcn_cfg = TrainConfig { iters: exp.fcn_iters, ..exp.train.clone() };
    let mut fcn_log = TrainLog::default();
    let schedule = exp.route.decay_schedule(target.k_w.min(target.k_a), exp.decay_rate, exp.fine_tune_iters);
    match schedule.filter(|_| !target.is_full_precision()) {
        None if exp.route == Route::P2 && !target.is_full_precision() => {
            if assets.lowbit_extractor.as_ref().map(SegNet::body_bits) != Some(target) {
                assets.lowbit_extractor = Some(pretrain_extractor(data, &exp.net, target, &pre_cfg)?);
            }
            let mut net = init_route(Route::P2, assets, &exp.net, init_seed)?;
            let cfg = TrainConfig { iters: exp.fcn_iters + exp.fine_tune_iters, ..exp.train.clone() };
            train(&mut net, data, &cfg, &mut BTreeMap::new(), &mut fcn_log)?;
            let val_miou = val_miou(&net, data)?;
            Ok(ExperimentReport { net, fcn_log, decay: None, bit_sequence: vec![target], val_miou })
        }
        schedule => {
            let mut net = match &assets.fp_fcn {
                Some(net) => net.clone(),
                None => {
                    if assets.fp_extractor.is_none() {
                        assets.fp_extractor = Some(pretrain_extractor(data, &exp.net, BitWidths::FULL, &pre_cfg)?);
                    }
                    let mut net = init_route(Route::P1, assets, &exp.net, init_seed)?;
                    train(&mut net, data, &fcn_cfg, &mut BTreeMap::new(), &mut fcn_log)?;
                    assets.fp_fcn = Some(net.clone());
                    net
                }
            };
            let mut bit_sequence = vec![BitWidths::FULL];
            let decay = match schedule {
                Some(s) => {
                    let steps = decay_steps(&s, target)?;
                    let report = run_decay_steps(&mut net, &steps, s.fine_tune_iters, data, &exp.train)?;
                    bit_sequence.extend(report.steps.iter().map(|st| st.bits));
                    Some(report)
                }
                None => None,
            };
            let val_miou = match decay.as_ref().and_then(DecayReport::final_miou) {
                Some(m) => m,
                None => val_miou(&net, data)?,
            };
            Ok(ExperimentReport { net, fcn_log, decay, bit_sequence, val_miou })
        }
    }
}
