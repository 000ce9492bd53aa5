//! Optimization: SGD with momentum, stage-wise loss scheduling, bit-width
//! decay, initialization routes, class weighting and bit allocation.

mod routes;
mod train;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quantize::quantization_error_bound;
use crate::tensor::Tensor;

pub use routes::{init_route, pretrain_extractor, run_experiment, Experiment, ExperimentReport, Route, RouteAssets};
pub use train::{decay_steps, evaluate, run_bit_width_decay, train, DecayReport, DecayStep, LogEntry, TrainLog};

/// `v ← momentum·v + g; p ← p − lr·v` for every parameter with a gradient.
/// Missing velocity entries start at zero.
pub fn sgd_momentum_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    velocity: &mut BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter {name}")))?;
        p.same_shape(g)?;
        let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape));
        v.same_shape(g)?;
        for ((p, v), g) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Bit-width decay `k = c − r·t`, fine-tuning `fine_tune_iters` per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecaySchedule {
    pub c: u32,
    pub r: u32,
    pub target: u32,
    pub fine_tune_iters: usize,
}

impl DecaySchedule {
    pub fn new(c: u32, r: u32, target: u32, fine_tune_iters: usize) -> Self {
        DecaySchedule { c, r, target, fine_tune_iters }
    }

    /// Jumps straight from `c` to `target` (a single decay step).
    pub fn direct(c: u32, target: u32, fine_tune_iters: usize) -> Self {
        DecaySchedule { c, r: (c - target.min(c)).max(1), target, fine_tune_iters }
    }

    /// Per-step iterations that cover `n_train` samples at least three times.
    pub fn three_epoch_iters(n_train: usize, batch: usize) -> usize {
        (3 * n_train).div_ceil(batch.max(1))
    }
}

/// `c, c−r, c−2r, …`, clamped so the last entry is exactly `target`.
pub fn decay_sequence(sched: &DecaySchedule) -> Result<Vec<u32>> {
    let DecaySchedule { c, r, target, .. } = *sched;
    if target == 0 || target > c || r == 0 || c > 8 {
        return Err(Error::BadSchedule(format!("c={c} r={r} target={target}")));
    }
    let mut seq = vec![c];
    let mut k = c;
    while k > target {
        k = k.saturating_sub(r).max(target);
        seq.push(k);
    }
    Ok(seq)
}

/// `W = 1/ln(c + p)` per class pixel frequency `p`.
pub fn class_weights(pixel_freqs: &[f64], c: f64) -> Result<Vec<f64>> {
    if c <= 1.0 || c.is_nan() {
        return Err(Error::BadConstant(format!("class weight constant {c} must exceed 1")));
    }
    Ok(pixel_freqs.iter().map(|p| 1.0 / (c + p).ln()).collect())
}

/// Quantization error model of a layer: `1/2^k_w + 1/2^k_a`.
pub fn allocation_error(k_w: u32, k_a: u32) -> f64 {
    quantization_error_bound(k_w) + quantization_error_bound(k_a)
}

/// Integer `(k_w, k_a)` with `k_w·k_a ≤ budget` minimizing [`allocation_error`].
/// Ties prefer `k_w == k_a`, then the larger `k_a`.
pub fn optimal_allocation(budget: u32) -> (u32, u32) {
    let budget = budget.max(1);
    let mut best = (1, 1);
    for k_w in 1..=budget {
        for k_a in 1..=budget / k_w {
            let (e, e_best) = (allocation_error(k_w, k_a), allocation_error(best.0, best.1));
            let better = e < e_best
                || (e == e_best && {
                    let balanced = (k_w == k_a, k_a);
                    let incumbent = (best.0 == best.1, best.1);
                    balanced > incumbent
                });
            if better {
                best = (k_w, k_a);
            }
        }
    }
    best
}

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub iters: usize,
    /// Iteration at which each scale's loss switches on, coarse to fine.
    /// Empty means equal splits of `iters`.
    pub stage_schedule: Vec<usize>,
    pub class_weight_c: f64,
    /// Fraction of `iters` after which the learning rate drops tenfold;
    /// `1.0` keeps it constant.
    pub lr_drop_at: f64,
    /// Random horizontal mirroring of training samples.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch: 8,
            iters: 600,
            stage_schedule: Vec::new(),
            class_weight_c: 1.4,
            lr_drop_at: 0.75,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::BadConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::BadConfig("batch must be positive".into()));
        }
        if self.class_weight_c <= 1.0 {
            return Err(Error::BadConstant(format!("class weight constant {}", self.class_weight_c)));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(Error::BadConfig(format!("lr_drop_at {} outside [0, 1]", self.lr_drop_at)));
        }
        if self.stage_schedule.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::BadConfig("stage schedule must be non-decreasing".into()));
        }
        Ok(())
    }

    /// Same run with every scale active from the first iteration.
    pub fn all_scales(&self, iters: usize) -> Self {
        TrainConfig { iters, stage_schedule: vec![0; 8], ..self.clone() }
    }

    /// Step learning-rate schedule.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.lr_drop_at < 1.0 && iter as f64 >= self.lr_drop_at * self.iters as f64 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// Start iteration of each of `n_scales` losses, coarse first.
    pub fn stage_starts(&self, n_scales: usize) -> Vec<usize> {
        (0..n_scales)
            .map(|i| match self.stage_schedule.get(i) {
                Some(&s) => s,
                None if self.stage_schedule.is_empty() => i * self.iters / n_scales.max(1),
                None => *self.stage_schedule.last().expect("non-empty"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
