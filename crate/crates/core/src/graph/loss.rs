//! Class-weighted cross-entropy summed over the active prediction scales.

use std::collections::BTreeMap;

use crate::dataset::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn uniform_class_weights(num_classes: usize) -> Vec<f64> {
    vec![1.0; num_classes]
}

/// Labels at a prediction stride (nearest sampling at cell centres).
pub fn downsample_labels(labels: &[LabelMap], stride: usize) -> Vec<LabelMap> {
    labels.iter().map(|l| l.downsample(stride)).collect()
}

/// Loss only; see [`stagewise_loss_with_grad`].
pub fn stagewise_loss(
    logits: &BTreeMap<usize, Tensor>,
    labels: &[LabelMap],
    scales: &[usize],
    class_weights: &[f64],
) -> Result<f64> {
    stagewise_loss_with_grad(logits, labels, scales, class_weights).map(|(l, _)| l)
}

/// Sum over `scales` of the weighted cross-entropy averaged over labelled
/// pixels at that scale; full-resolution `labels` are downsampled per scale.
/// Returns the loss and its gradient per logit tensor.
pub fn stagewise_loss_with_grad(
    logits: &BTreeMap<usize, Tensor>,
    labels: &[LabelMap],
    scales: &[usize],
    class_weights: &[f64],
) -> Result<(f64, BTreeMap<usize, Tensor>)> {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for &stride in scales {
        let z = logits.get(&stride).ok_or_else(|| Error::BadConfig(format!("no logits at stride {stride}")))?;
        let (loss, g) = scale_loss(z, labels, stride, class_weights)?;
        total += loss;
        grads.insert(stride, g);
    }
    Ok((total, grads))
}

fn scale_loss(z: &Tensor, labels: &[LabelMap], stride: usize, class_weights: &[f64]) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = z.shape;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} label maps for batch of {n}", labels.len())));
    }
    if class_weights.len() != c {
        return Err(Error::ShapeMismatch(format!("{} class weights for {c} classes", class_weights.len())));
    }
    let mut targets = Vec::with_capacity(n);
    for l in labels {
        if l.height != h * stride || l.width != w * stride {
            return Err(Error::ShapeMismatch(format!(
                "labels {}x{} do not match logits {h}x{w} at stride {stride}",
                l.height, l.width
            )));
        }
        if let Some(&bad) = l.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= c) {
            return Err(Error::BadLabels(format!("label {bad} outside 0..{c}")));
        }
        targets.push(l.downsample(stride));
    }
    let count = targets.iter().flat_map(|t| &t.data).filter(|&&v| v != IGNORE_LABEL).count();
    let mut grad = Tensor::zeros(z.shape);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut p = vec![0.0; c];
    for (b, t) in targets.iter().enumerate() {
        for pos in 0..h * w {
            let y = t.data[pos];
            if y == IGNORE_LABEL {
                continue;
            }
            let at = |ch: usize| (b * c + ch) * h * w + pos;
            let max = (0..c).map(|ch| z.data[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ch, pc) in p.iter_mut().enumerate() {
                *pc = (z.data[at(ch)] - max).exp();
                sum += *pc;
            }
            let y = y as usize;
            let wy = class_weights[y] * norm;
            loss -= wy * ((z.data[at(y)] - max) - sum.ln());
            for (ch, pc) in p.iter().enumerate() {
                grad.data[at(ch)] = wy * (pc / sum - (ch == y) as u8 as f64);
            }
        }
    }
    Ok((loss, grad))
}
