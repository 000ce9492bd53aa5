//! Forward and backward passes over a [`SegNet`].

use std::collections::{BTreeMap, HashMap};

use super::{residual_projection, residual_second, LayerKind, LayerSpec, SegNet};
use crate::bitconv::{
    bitconv2d_with_sums, conv2d_reference, dequantize_conv, weight_code_sums, ConvGeom, KernelCounter,
};
use crate::bitpack::pack;
use crate::conv::{conv_backward, conv_forward};
use crate::error::{Error, Result};
use crate::quantize::{
    fake_quantize_activations, fake_quantize_weights, is_full_precision, quantize_activations, quantize_weights,
    ste_grad, QuantSpec, FULL_PRECISION,
};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

/// How convolutions are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvBackend {
    /// Dequantized floats through GEMM; the only backend that supports training.
    Float,
    /// Bit-plane popcount kernels with exact integer dequantization. Layers
    /// with a full-precision side fall back to [`ConvBackend::Float`].
    Bit,
    /// Direct loop over dequantized values with compensated summation.
    Reference,
}

/// Whether quantizers round (normal use) or only clamp.
///
/// `Surrogate` keeps the straight-through backward pass unchanged, which makes
/// it the piecewise-linear function whose gradient the STE computes; finite
/// differences against it validate the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Quantize,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub backend: ConvBackend,
    pub quant_mode: QuantMode,
    /// Batch statistics in batch norm (and report them) instead of running ones.
    pub train: bool,
    /// Keep intermediates for [`backward`].
    pub keep_cache: bool,
    /// Strides to evaluate; `None` evaluates every scale. Layers not feeding a
    /// selected scale are skipped.
    pub scales: Option<Vec<usize>>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            backend: ConvBackend::Float,
            quant_mode: QuantMode::Quantize,
            train: false,
            keep_cache: false,
            scales: None,
        }
    }

    pub fn train() -> Self {
        ForwardOptions { train: true, keep_cache: true, ..Self::eval() }
    }

    pub fn with_backend(mut self, backend: ConvBackend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_scales(mut self, scales: &[usize]) -> Self {
        self.scales = Some(scales.to_vec());
        self
    }

    pub fn with_quant_mode(mut self, mode: QuantMode) -> Self {
        self.quant_mode = mode;
        self
    }
}

/// Parameter gradients keyed like [`SegNet::params`].
pub type Grads = BTreeMap<String, Tensor>;

/// Gradients of the loss with respect to each layer's output.
pub type ActivationGrads = BTreeMap<String, Tensor>;

pub struct Forward {
    /// Logits per stride, `(N, classes, H/stride, W/stride)`.
    pub logits: BTreeMap<usize, Tensor>,
    /// Batch mean and variance per batch-norm prefix (train mode only).
    pub batch_stats: BTreeMap<String, (Tensor, Tensor)>,
    /// Multiply-accumulates plus element-wise additions executed.
    pub ops: u64,
    /// Binary convolution passes run by the bit backend.
    pub kernel_passes: u64,
    cache: Option<Cache>,
}

struct Cache {
    layers: Vec<Option<LayerCache>>,
    out_shapes: Vec<Option<[usize; 4]>>,
}

struct ConvCache {
    prefix: String,
    geom: ConvGeom,
    x_shape: [usize; 4],
    cols: Vec<f64>,
    wq: Tensor,
    ste: bool,
}

struct BnCache {
    prefix: String,
    xhat: Tensor,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    batch: bool,
}

struct ActCache {
    pre: Tensor,
}

enum LayerCache {
    Input,
    ConvBnAct {
        conv: ConvCache,
        bn: BnCache,
        act: ActCache,
    },
    Residual {
        conv1: ConvCache,
        bn1: BnCache,
        act1: ActCache,
        conv2: ConvCache,
        bn2: BnCache,
        proj: Option<(ConvCache, BnCache)>,
        out: ActCache,
    },
    Head {
        conv: ConvCache,
    },
    Upsample,
    Add,
}

/// Layer output: values plus the bit-width they are quantized to.
#[derive(Clone)]
struct Act {
    t: Tensor,
    bits: u32,
}

struct Exec<'a> {
    net: &'a SegNet,
    opts: &'a ForwardOptions,
    counter: KernelCounter,
    ops: u64,
    stats: BTreeMap<String, (Tensor, Tensor)>,
}

fn param<'n>(net: &'n SegNet, name: &str) -> Result<&'n Tensor> {
    net.params.get(name).ok_or_else(|| Error::MissingAsset(format!("parameter {name}")))
}

fn buffer<'n>(net: &'n SegNet, name: &str) -> Result<&'n Tensor> {
    net.buffers.get(name).ok_or_else(|| Error::MissingAsset(format!("buffer {name}")))
}

/// Layers that feed the selected scale outputs.
fn needed_layers(net: &SegNet, scales: Option<&[usize]>) -> Result<Vec<bool>> {
    let index: HashMap<&str, usize> = net.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let mut needed = vec![false; net.layers.len()];
    let mut stack = Vec::new();
    for (stride, name) in &net.scales {
        if scales.is_none_or(|s| s.contains(stride)) {
            stack.push(index[name.as_str()]);
        }
    }
    if let Some(sel) = scales {
        for s in sel {
            if !net.scales.iter().any(|(st, _)| st == s) {
                return Err(Error::BadConfig(format!("no output at stride {s}")));
            }
        }
    }
    while let Some(i) = stack.pop() {
        if !needed[i] {
            needed[i] = true;
            stack.extend(net.layers[i].inputs.iter().map(|n| index[n.as_str()]));
        }
    }
    Ok(needed)
}

fn check_input_size(net: &SegNet, shape: [usize; 4]) -> Result<()> {
    let stride = net.max_stride();
    let [_, c, h, w] = shape;
    if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
        return Err(Error::NonDivisibleInput { h, w, stride });
    }
    if c != net.in_channels() {
        return Err(Error::ShapeMismatch(format!("image has {c} channels, net expects {}", net.in_channels())));
    }
    Ok(())
}

/// Runs the network on a batch `(N, C, H, W)`; `H` and `W` must be multiples
/// of the deepest stride.
pub fn forward(net: &SegNet, image: &Tensor, opts: &ForwardOptions) -> Result<Forward> {
    check_input_size(net, image.shape)?;
    if opts.keep_cache && opts.backend != ConvBackend::Float {
        return Err(Error::BadConfig("training caches need the float backend".into()));
    }
    if opts.quant_mode == QuantMode::Surrogate && opts.backend == ConvBackend::Bit {
        return Err(Error::BadConfig("surrogate mode has no integer codes for the bit backend".into()));
    }
    let needed = needed_layers(net, opts.scales.as_deref())?;
    let mut exec = Exec { net, opts, counter: KernelCounter::new(), ops: 0, stats: BTreeMap::new() };
    let mut outs: Vec<Option<Act>> = vec![None; net.layers.len()];
    let mut caches: Vec<Option<LayerCache>> = (0..net.layers.len()).map(|_| None).collect();
    let index: HashMap<&str, usize> = net.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    for (i, layer) in net.layers.iter().enumerate() {
        if !needed[i] {
            continue;
        }
        let inputs: Vec<&Act> =
            layer.inputs.iter().map(|n| outs[index[n.as_str()]].as_ref().expect("inputs run first")).collect();
        let (out, cache) = exec.layer(layer, &inputs, image)?;
        outs[i] = Some(out);
        if opts.keep_cache {
            caches[i] = Some(cache);
        }
    }
    let mut logits = BTreeMap::new();
    for (stride, name) in &net.scales {
        if let Some(out) = &outs[index[name.as_str()]] {
            logits.insert(*stride, out.t.clone());
        }
    }
    let out_shapes = outs.iter().map(|o| o.as_ref().map(|a| a.t.shape)).collect();
    Ok(Forward {
        logits,
        batch_stats: exec.stats,
        ops: exec.ops,
        kernel_passes: exec.counter.passes(),
        cache: opts.keep_cache.then_some(Cache { layers: caches, out_shapes }),
    })
}

impl Exec<'_> {
    fn layer(&mut self, layer: &LayerSpec, inputs: &[&Act], image: &Tensor) -> Result<(Act, LayerCache)> {
        let q = layer.quant;
        match layer.kind {
            LayerKind::Input => {
                let bits = q.k_a;
                let t = match self.opts.quant_mode {
                    QuantMode::Quantize => fake_quantize_activations(image, bits)?,
                    QuantMode::Surrogate => image.map(|x| x.clamp(0.0, 1.0)),
                };
                Ok((Act { t, bits }, LayerCache::Input))
            }
            LayerKind::ConvBnAct => {
                let g = layer.geom.expect("validated");
                let (y, conv) = self.conv(inputs[0], &layer.name, &g, q.k_w)?;
                let (y, bn) = self.bn(y, &layer.name)?;
                let (out, act) = self.act(y, q.k_a)?;
                Ok((out, LayerCache::ConvBnAct { conv, bn, act }))
            }
            LayerKind::ResidualBlock => {
                let g = layer.geom.expect("validated");
                let x = inputs[0];
                let p1 = format!("{}.conv1", layer.name);
                let p2 = format!("{}.conv2", layer.name);
                let (y, conv1) = self.conv(x, &p1, &g, q.k_w)?;
                let (y, bn1) = self.bn(y, &p1)?;
                let (h, act1) = self.act(y, q.k_a)?;
                let (y, conv2) = self.conv(&h, &p2, &residual_second(&g), q.k_w)?;
                let (mut y, bn2) = self.bn(y, &p2)?;
                let proj = match residual_projection(&g) {
                    Some(pg) => {
                        let pp = format!("{}.proj", layer.name);
                        let (s, pc) = self.conv(x, &pp, &pg, q.k_w)?;
                        let (s, pb) = self.bn(s, &pp)?;
                        y.add_assign(&s)?;
                        Some((pc, pb))
                    }
                    None => {
                        y.add_assign(&x.t)?;
                        None
                    }
                };
                self.ops += y.len() as u64;
                let (out, act) = self.act(y, q.k_a)?;
                Ok((out, LayerCache::Residual { conv1, bn1, act1, conv2, bn2, proj, out: act }))
            }
            LayerKind::PredictHead => {
                let g = layer.geom.expect("validated");
                let (mut y, conv) = self.conv(inputs[0], &layer.name, &g, q.k_w)?;
                let bias = param(self.net, &format!("{}.b", layer.name))?;
                let [n, c, h, w] = y.shape;
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * h * w;
                        y.data[start..start + h * w].iter_mut().for_each(|v| *v += bias.data[ch]);
                    }
                }
                Ok((Act { t: y, bits: FULL_PRECISION }, LayerCache::Head { conv }))
            }
            LayerKind::Upsample2x => {
                Ok((Act { t: upsample2x(&inputs[0].t), bits: inputs[0].bits }, LayerCache::Upsample))
            }
            LayerKind::Add => {
                let mut y = inputs[0].t.clone();
                for other in &inputs[1..] {
                    y.add_assign(&other.t)?;
                    self.ops += y.len() as u64;
                }
                Ok((Act { t: y, bits: FULL_PRECISION }, LayerCache::Add))
            }
        }
    }

    fn conv(&mut self, x: &Act, prefix: &str, g: &ConvGeom, k_w: u32) -> Result<(Tensor, ConvCache)> {
        let w = param(self.net, &format!("{prefix}.w"))?;
        let [n, _, h, wd] = x.t.shape;
        self.ops += n as u64 * g.macs(h, wd);
        let quantized = !is_full_precision(k_w);
        let wq = match (self.opts.quant_mode, quantized) {
            (_, false) => w.clone(),
            (QuantMode::Quantize, true) => fake_quantize_weights(w, k_w)?,
            (QuantMode::Surrogate, true) => w.map(|v| v.clamp(-1.0, 1.0)),
        };
        let bit_path = self.opts.backend == ConvBackend::Bit && quantized && !is_full_precision(x.bits);
        let mut cols = Vec::new();
        let y = if bit_path {
            let acts = pack(&quantize_activations(&x.t, x.bits)?.codes, x.bits)?;
            let weights = pack(&quantize_weights(w, k_w)?.codes, k_w)?;
            let (acc, sums) = bitconv2d_with_sums(&acts, &weights, g, &self.counter)?;
            dequantize_conv(&acc, &QuantSpec::new(k_w, x.bits)?, &sums, &weight_code_sums(&weights), g.n_taps())?
        } else if self.opts.backend == ConvBackend::Reference {
            conv2d_reference(&x.t, &wq, g)?
        } else {
            let (y, c) = conv_forward(&x.t, &wq, g)?;
            if self.opts.keep_cache {
                cols = c;
            }
            y
        };
        let cache = ConvCache { prefix: prefix.to_string(), geom: *g, x_shape: x.t.shape, cols, wq, ste: quantized };
        Ok((y, cache))
    }

    fn bn(&mut self, mut x: Tensor, prefix: &str) -> Result<(Tensor, BnCache)> {
        let gamma = &param(self.net, &format!("{prefix}.gamma"))?.data;
        let beta = &param(self.net, &format!("{prefix}.beta"))?.data;
        let [n, c, h, w] = x.shape;
        let m = (n * h * w) as f64;
        let (mean, var) = if self.opts.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let plane = || (0..n).flat_map(|b| x.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter());
                mean[ch] = plane().sum::<f64>() / m;
                var[ch] = plane().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m;
            }
            self.stats.insert(
                prefix.to_string(),
                (Tensor::from_vec([1, c, 1, 1], mean.clone())?, Tensor::from_vec([1, c, 1, 1], var.clone())?),
            );
            (mean, var)
        } else {
            (
                buffer(self.net, &format!("{prefix}.mean"))?.data.clone(),
                buffer(self.net, &format!("{prefix}.var"))?.data.clone(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = if self.opts.keep_cache { Tensor::zeros(x.shape) } else { Tensor::zeros([0; 4]) };
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * h * w;
                for i in start..start + h * w {
                    let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                    if self.opts.keep_cache {
                        xhat.data[i] = xh;
                    }
                    x.data[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let cache = BnCache { prefix: prefix.to_string(), xhat, inv_std, gamma: gamma.clone(), batch: self.opts.train };
        Ok((x, cache))
    }

    fn act(&self, x: Tensor, k_a: u32) -> Result<(Act, ActCache)> {
        let t = match self.opts.quant_mode {
            QuantMode::Quantize => fake_quantize_activations(&x, k_a)?,
            QuantMode::Surrogate => x.map(|v| v.clamp(0.0, 1.0)),
        };
        let pre = if self.opts.keep_cache { x } else { Tensor::zeros([0; 4]) };
        Ok((Act { t, bits: k_a }, ActCache { pre }))
    }
}

fn upsample2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                y.data[(p * 2 * h + i) * 2 * w + j] = x.data[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let [n, c, h2, w2] = dy.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx.data[(p * h + i / 2) * w + j / 2] += dy.data[(p * h2 + i) * w2 + j];
            }
        }
    }
    dx
}

/// Backpropagates logit gradients (keyed by stride) into parameter gradients.
/// Every parameter gets an entry; untouched ones are zero.
pub fn backward(net: &SegNet, fwd: &Forward, dlogits: &BTreeMap<usize, Tensor>) -> Result<Grads> {
    backward_full(net, fwd, dlogits).map(|(g, _)| g)
}

/// Like [`backward`], also returning the gradient at every layer output.
pub(crate) fn backward_full(
    net: &SegNet,
    fwd: &Forward,
    dlogits: &BTreeMap<usize, Tensor>,
) -> Result<(Grads, ActivationGrads)> {
    let cache = fwd.cache.as_ref().ok_or_else(|| Error::BadConfig("forward ran without keep_cache".into()))?;
    let index: HashMap<&str, usize> = net.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let mut grads: Grads = net.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape))).collect();
    let mut douts: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    for (stride, d) in dlogits {
        let (_, name) = net
            .scales
            .iter()
            .find(|(s, _)| s == stride)
            .ok_or_else(|| Error::BadConfig(format!("no output at stride {stride}")))?;
        let i = index[name.as_str()];
        if let Some(shape) = cache.out_shapes[i] {
            if shape != d.shape {
                return Err(Error::ShapeMismatch(format!("logit gradient {:?} vs {:?}", d.shape, shape)));
            }
            accumulate(&mut douts[i], d.clone())?;
        }
    }
    let mut act_grads = ActivationGrads::new();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let (Some(dy), Some(lc)) = (douts[i].take(), cache.layers[i].as_ref()) else { continue };
        act_grads.insert(layer.name.clone(), dy.clone());
        let send = |name: &str, d: Tensor, douts: &mut Vec<Option<Tensor>>| accumulate(&mut douts[index[name]], d);
        match lc {
            LayerCache::Input => {}
            LayerCache::ConvBnAct { conv, bn, act } => {
                let d = act_backward(&dy, act)?;
                let d = bn_backward(&d, bn, &mut grads)?;
                let dx = conv_grad(net, &d, conv, &mut grads)?;
                send(&layer.inputs[0], dx, &mut douts)?;
            }
            LayerCache::Residual { conv1, bn1, act1, conv2, bn2, proj, out } => {
                let d = act_backward(&dy, out)?;
                let mut dx = match proj {
                    Some((pc, pb)) => {
                        let ds = bn_backward(&d, pb, &mut grads)?;
                        conv_grad(net, &ds, pc, &mut grads)?
                    }
                    None => d.clone(),
                };
                let dh = bn_backward(&d, bn2, &mut grads)?;
                let dh = conv_grad(net, &dh, conv2, &mut grads)?;
                let dh = act_backward(&dh, act1)?;
                let dh = bn_backward(&dh, bn1, &mut grads)?;
                dx.add_assign(&conv_grad(net, &dh, conv1, &mut grads)?)?;
                send(&layer.inputs[0], dx, &mut douts)?;
            }
            LayerCache::Head { conv } => {
                let [n, c, h, w] = dy.shape;
                let db = grads.get_mut(&format!("{}.b", layer.name)).expect("bias grad");
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * h * w;
                        db.data[ch] += dy.data[start..start + h * w].iter().sum::<f64>();
                    }
                }
                let dx = conv_grad(net, &dy, conv, &mut grads)?;
                send(&layer.inputs[0], dx, &mut douts)?;
            }
            LayerCache::Upsample => send(&layer.inputs[0], upsample2x_backward(&dy), &mut douts)?,
            LayerCache::Add => {
                for input in &layer.inputs {
                    send(input, dy.clone(), &mut douts)?;
                }
            }
        }
    }
    Ok((grads, act_grads))
}

fn accumulate(slot: &mut Option<Tensor>, d: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&d),
        None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

fn act_backward(dy: &Tensor, cache: &ActCache) -> Result<Tensor> {
    ste_grad(dy, &cache.pre, 0.0, 1.0)
}

fn bn_backward(dy: &Tensor, cache: &BnCache, grads: &mut Grads) -> Result<Tensor> {
    let [n, c, h, w] = dy.shape;
    let m = (n * h * w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dxhat_sum = vec![0.0; c];
    let mut dxhat_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * h * w;
            for i in start..start + h * w {
                dgamma[ch] += dy.data[i] * cache.xhat.data[i];
                dbeta[ch] += dy.data[i];
            }
        }
    }
    for ch in 0..c {
        dxhat_sum[ch] = dbeta[ch] * cache.gamma[ch];
        dxhat_xhat[ch] = dgamma[ch] * cache.gamma[ch];
    }
    let mut dx = Tensor::zeros(dy.shape);
    for b in 0..n {
        for ch in 0..c {
            let (g, s) = (cache.gamma[ch], cache.inv_std[ch]);
            let start = (b * c + ch) * h * w;
            for i in start..start + h * w {
                let dxhat = dy.data[i] * g;
                dx.data[i] = if cache.batch {
                    s / m * (m * dxhat - dxhat_sum[ch] - cache.xhat.data[i] * dxhat_xhat[ch])
                } else {
                    dxhat * s
                };
            }
        }
    }
    for (suffix, d) in [("gamma", dgamma), ("beta", dbeta)] {
        let g = grads.get_mut(&format!("{}.{suffix}", cache.prefix)).expect("bn grad");
        g.data.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    Ok(dx)
}

fn conv_grad(net: &SegNet, dy: &Tensor, cache: &ConvCache, grads: &mut Grads) -> Result<Tensor> {
    let name = format!("{}.w", cache.prefix);
    let (dx, dwq) = conv_backward(dy, &cache.cols, &cache.wq, cache.x_shape, &cache.geom, true);
    let dw = if cache.ste { ste_grad(&dwq, param(net, &name)?, -1.0, 1.0)? } else { dwq };
    grads.get_mut(&name).expect("weight grad").add_assign(&dw)?;
    Ok(dx.expect("requested"))
}

/// Operation count of one image, following the same rules as [`forward`].
pub(crate) fn count_ops(net: &SegNet, h: usize, w: usize) -> u64 {
    let mut dims: HashMap<&str, (usize, usize, usize)> = HashMap::new();
    let mut ops = 0u64;
    for layer in &net.layers {
        let (ih, iw, ic) = layer.inputs.first().map_or((h, w, net.in_channels()), |n| dims[n.as_str()]);
        let out = match layer.kind {
            LayerKind::Input => (h, w, ic),
            LayerKind::Upsample2x => (2 * ih, 2 * iw, ic),
            LayerKind::Add => {
                ops += ((layer.inputs.len() - 1) * ih * iw * ic) as u64;
                (ih, iw, ic)
            }
            _ => {
                let g = layer.geom.expect("conv layer");
                let (oh, ow) = g.out_hw(ih, iw).unwrap_or((0, 0));
                ops += g.macs(ih, iw);
                if layer.kind == LayerKind::ResidualBlock {
                    ops += residual_second(&g).macs(oh, ow);
                    ops += residual_projection(&g).map_or(0, |p| p.macs(ih, iw));
                    ops += (oh * ow * g.out_ch) as u64;
                }
                (oh, ow, g.out_ch)
            }
        };
        dims.insert(&layer.name, out);
    }
    ops
}
