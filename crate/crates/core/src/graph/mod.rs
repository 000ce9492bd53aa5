//! The miniature segmentation network: a residual feature extractor with
//! coarse-to-fine reconstruction branches, each ending in a prediction head.
//!
//! ```text
//! image ─ stem ─ stage1 ─ stage2 ─────────── recon4 ─ head4 ─ add ─▶ logits@4
//!          s1      s2       s4    └ stage3 ─ recon8 ─ head8 ─ up ─┘
//!                                    s8                  └──────────▶ logits@8
//! ```

mod exec;
mod loss;
mod model_file;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;

use crate::bitconv::ConvGeom;
use crate::dataset::LabelMap;
use crate::error::{Error, Result};
use crate::quantize::{is_full_precision, QuantSpec, FULL_PRECISION};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub use exec::{backward, forward, ActivationGrads, ConvBackend, Forward, ForwardOptions, Grads, QuantMode};
pub use loss::{downsample_labels, stagewise_loss, stagewise_loss_with_grad, uniform_class_weights};
pub use model_file::{load_model, read_model, save_model, write_model, ModelFile};

/// Bit-width used for the first layer's weights and the 8-bit image input.
pub const FIRST_LAYER_BITS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    /// Convolution without bias, batch norm, bounded activation.
    ConvBnAct,
    /// Two convolutions with a shortcut (identity, or 1×1 projection when
    /// stride or width change) and a bounded activation after the sum.
    ResidualBlock,
    /// Nearest-neighbour 2× upsampling.
    Upsample2x,
    /// Convolution with bias producing class logits.
    PredictHead,
    /// Element-wise sum of all inputs.
    Add,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Input => 0,
            LayerKind::ConvBnAct => 1,
            LayerKind::ResidualBlock => 2,
            LayerKind::Upsample2x => 3,
            LayerKind::PredictHead => 4,
            LayerKind::Add => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => LayerKind::Input,
            1 => LayerKind::ConvBnAct,
            2 => LayerKind::ResidualBlock,
            3 => LayerKind::Upsample2x,
            4 => LayerKind::PredictHead,
            5 => LayerKind::Add,
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        })
    }
}

/// Reconstruction filter applied on every branch before its prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReconVariant {
    SingleConv,
    WideConv,
    ResidualBlock,
}

impl ReconVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" | "single-conv" => Ok(ReconVariant::SingleConv),
            "wide" | "wide-conv" => Ok(ReconVariant::WideConv),
            "residual" | "residual-block" => Ok(ReconVariant::ResidualBlock),
            other => Err(Error::BadConfig(format!("unknown reconstruction variant {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReconVariant::SingleConv => "single",
            ReconVariant::WideConv => "wide",
            ReconVariant::ResidualBlock => "residual",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// For residual blocks: geometry of the first convolution.
    pub geom: Option<ConvGeom>,
    /// `k_w` for the layer's weights, `k_a` for the activation it emits.
    pub quant: QuantSpec,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, geom: Option<ConvGeom>, quant: QuantSpec, inputs: &[&str]) -> Self {
        LayerSpec { name: name.to_string(), kind, geom, quant, inputs: inputs.iter().map(|s| s.to_string()).collect() }
    }

    /// Every convolution the layer runs: `(parameter prefix, geometry)`.
    pub fn convs(&self) -> Vec<(String, ConvGeom)> {
        let Some(g) = self.geom else { return Vec::new() };
        match self.kind {
            LayerKind::ConvBnAct | LayerKind::PredictHead => vec![(self.name.clone(), g)],
            LayerKind::ResidualBlock => {
                let mut v =
                    vec![(format!("{}.conv1", self.name), g), (format!("{}.conv2", self.name), residual_second(&g))];
                if let Some(p) = residual_projection(&g) {
                    v.push((format!("{}.proj", self.name), p));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    fn has_activation(&self) -> bool {
        matches!(self.kind, LayerKind::Input | LayerKind::ConvBnAct | LayerKind::ResidualBlock)
    }
}

pub(crate) fn residual_second(g: &ConvGeom) -> ConvGeom {
    ConvGeom { in_ch: g.out_ch, stride: 1, ..*g }
}

pub(crate) fn residual_projection(g: &ConvGeom) -> Option<ConvGeom> {
    (g.stride != 1 || g.in_ch != g.out_ch).then_some(ConvGeom {
        in_ch: g.in_ch,
        out_ch: g.out_ch,
        kh: 1,
        kw: 1,
        stride: g.stride,
        pad: 0,
    })
}

/// Layer DAG plus master parameters (full precision, quantized on the fly).
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// `(stride, name of the layer producing that scale's logits)`, coarse first.
    pub scales: Vec<(usize, String)>,
    /// Trainable tensors.
    pub params: BTreeMap<String, Tensor>,
    /// Batch-norm running statistics.
    pub buffers: BTreeMap<String, Tensor>,
}

/// Per-layer bit-widths a network is built or re-quantized with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitWidths {
    pub k_w: u32,
    pub k_a: u32,
}

impl BitWidths {
    pub const FULL: BitWidths = BitWidths { k_w: FULL_PRECISION, k_a: FULL_PRECISION };

    pub fn new(k_w: u32, k_a: u32) -> Self {
        BitWidths { k_w, k_a }
    }

    pub fn uniform(k: u32) -> Self {
        BitWidths { k_w: k, k_a: k }
    }

    pub fn is_full_precision(&self) -> bool {
        is_full_precision(self.k_w) && is_full_precision(self.k_a)
    }
}

impl From<QuantSpec> for BitWidths {
    fn from(q: QuantSpec) -> Self {
        BitWidths { k_w: q.k_w, k_a: q.k_a }
    }
}

impl std::fmt::Display for BitWidths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |k: u32| if is_full_precision(k) { "fp".to_string() } else { k.to_string() };
        write!(f, "{}-{}", show(self.k_w), show(self.k_a))
    }
}

/// Toy network configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_ch: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub variant: ReconVariant,
    pub bits: BitWidths,
}

/// `n` normal samples with standard deviation `std` (Box-Muller, both outputs used).
fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let (sin, cos) = (std::f64::consts::TAU * rng.gen::<f64>()).sin_cos();
        let r = std * (-2.0 * u1.ln()).sqrt();
        out.extend([r * cos, r * sin]);
    }
    out.truncate(n);
    out
}

/// Builds the toy BFCN: stem, three stride-2 residual stages (strides 2, 4, 8),
/// and reconstruction branches at strides 8 and 4.
pub fn build_toy_bfcn(cfg: &NetConfig, init_seed: u64) -> Result<SegNet> {
    if cfg.base_width < 4 {
        return Err(Error::BadConfig(format!("base_width {} < 4", cfg.base_width)));
    }
    if cfg.num_classes < 2 || cfg.num_classes > u16::MAX as usize {
        return Err(Error::BadConfig(format!("num_classes {} < 2", cfg.num_classes)));
    }
    if cfg.in_ch == 0 {
        return Err(Error::BadConfig("in_ch must be positive".into()));
    }
    let body = QuantSpec::new(cfg.bits.k_w, cfg.bits.k_a)?;
    let first = first_layer_quant(cfg.bits)?;
    let input = QuantSpec::new(FULL_PRECISION, first_layer_input_bits(cfg.bits))?;
    let w = cfg.base_width;
    let c = cfg.num_classes;
    let conv = |i, o, k, s| ConvGeom::new(i, o, k, s, k / 2);
    let mut layers = vec![
        LayerSpec::new("image", LayerKind::Input, None, input, &[]),
        LayerSpec::new("stem", LayerKind::ConvBnAct, Some(conv(cfg.in_ch, w, 3, 1)?), first, &["image"]),
        LayerSpec::new("stage1", LayerKind::ResidualBlock, Some(conv(w, w, 3, 2)?), body, &["stem"]),
        LayerSpec::new("stage2", LayerKind::ResidualBlock, Some(conv(w, 2 * w, 3, 2)?), body, &["stage1"]),
        LayerSpec::new("stage3", LayerKind::ResidualBlock, Some(conv(2 * w, 4 * w, 3, 2)?), body, &["stage2"]),
    ];
    for (stride, feat, ch) in [(8, "stage3", 4 * w), (4, "stage2", 2 * w)] {
        let recon = format!("recon{stride}");
        let (kind, out) = match cfg.variant {
            ReconVariant::SingleConv => (LayerKind::ConvBnAct, ch),
            ReconVariant::WideConv => (LayerKind::ConvBnAct, 2 * ch),
            ReconVariant::ResidualBlock => (LayerKind::ResidualBlock, ch),
        };
        layers.push(LayerSpec::new(&recon, kind, Some(conv(ch, out, 3, 1)?), body, &[feat]));
        layers.push(LayerSpec::new(
            &format!("head{stride}"),
            LayerKind::PredictHead,
            Some(conv(out, c, 1, 1)?),
            body,
            &[&recon],
        ));
    }
    layers.push(LayerSpec::new("up8", LayerKind::Upsample2x, None, body, &["head8"]));
    layers.push(LayerSpec::new("refine4", LayerKind::Add, None, body, &["head4", "up8"]));
    let scales = vec![(8, "head8".to_string()), (4, "refine4".to_string())];
    SegNet::with_random_params(layers, c, scales, init_seed)
}

fn first_layer_quant(bits: BitWidths) -> Result<QuantSpec> {
    if bits.is_full_precision() {
        Ok(QuantSpec::full_precision())
    } else {
        QuantSpec::new(FIRST_LAYER_BITS, bits.k_a)
    }
}

fn first_layer_input_bits(bits: BitWidths) -> u32 {
    if bits.is_full_precision() {
        FULL_PRECISION
    } else {
        FIRST_LAYER_BITS
    }
}

impl SegNet {
    /// Validates the DAG and initializes parameters (He-normal weights).
    pub fn with_random_params(
        layers: Vec<LayerSpec>,
        num_classes: usize,
        scales: Vec<(usize, String)>,
        init_seed: u64,
    ) -> Result<Self> {
        let mut net = SegNet { layers, num_classes, scales, params: BTreeMap::new(), buffers: BTreeMap::new() };
        net.validate()?;
        let mut rng = rng_for(init_seed, "init", 0);
        let layers = net.layers.clone();
        for layer in &layers {
            for (prefix, g) in layer.convs() {
                let fan_in = g.n_taps() as f64;
                let std =
                    if layer.kind == LayerKind::PredictHead { (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
                let data = normal_vec(&mut rng, g.weight_shape().iter().product(), std);
                net.params.insert(format!("{prefix}.w"), Tensor::from_vec(g.weight_shape(), data)?);
                let ch = [1, g.out_ch, 1, 1];
                if layer.kind == LayerKind::PredictHead {
                    net.params.insert(format!("{prefix}.b"), Tensor::zeros(ch));
                    continue;
                }
                // Batch norm feeding the [0, 1] activation starts centred in that range.
                let beta = if prefix.ends_with(".conv2") { 0.0 } else { 0.5 };
                net.params.insert(format!("{prefix}.gamma"), Tensor::filled(ch, 0.5));
                net.params.insert(format!("{prefix}.beta"), Tensor::filled(ch, beta));
                net.buffers.insert(format!("{prefix}.mean"), Tensor::zeros(ch));
                net.buffers.insert(format!("{prefix}.var"), Tensor::filled(ch, 1.0));
            }
        }
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut inputs = 0;
        for layer in &self.layers {
            for dep in &layer.inputs {
                if !seen.contains(dep.as_str()) {
                    return Err(Error::BadConfig(format!(
                        "layer {} reads {dep}, which is not defined before it",
                        layer.name
                    )));
                }
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::BadConfig(format!("duplicate layer name {}", layer.name)));
            }
            let expected_inputs = match layer.kind {
                LayerKind::Input => 0,
                LayerKind::Add => layer.inputs.len().max(2),
                _ => 1,
            };
            if layer.inputs.len() != expected_inputs {
                return Err(Error::BadConfig(format!("layer {} has {} inputs", layer.name, layer.inputs.len())));
            }
            let needs_geom =
                matches!(layer.kind, LayerKind::ConvBnAct | LayerKind::ResidualBlock | LayerKind::PredictHead);
            if needs_geom != layer.geom.is_some() {
                return Err(Error::BadConfig(format!("layer {} geometry mismatch", layer.name)));
            }
            if let Some(g) = layer.geom {
                g.validate()?;
            }
            inputs += (layer.kind == LayerKind::Input) as usize;
        }
        if inputs != 1 {
            return Err(Error::BadConfig(format!("{inputs} input layers, expected exactly one")));
        }
        let mut strides = HashSet::new();
        for (stride, name) in &self.scales {
            let layer = self.layer(name)?;
            if matches!(layer.kind, LayerKind::Input) || layer.has_activation() {
                return Err(Error::BadConfig(format!("scale output {name} is not a logit layer")));
            }
            if !strides.insert(*stride) {
                return Err(Error::BadConfig(format!("two outputs at stride {stride}")));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name).ok_or_else(|| Error::BadConfig(format!("no layer named {name}")))
    }

    pub fn input_layer(&self) -> &LayerSpec {
        self.layers.iter().find(|l| l.kind == LayerKind::Input).expect("validated net has an input")
    }

    pub fn in_channels(&self) -> usize {
        self.layers
            .iter()
            .find(|l| l.inputs.first().is_some_and(|i| *i == self.input_layer().name))
            .and_then(|l| l.geom)
            .map_or(0, |g| g.in_ch)
    }

    pub fn max_stride(&self) -> usize {
        let mut stride: HashMap<&str, usize> = HashMap::new();
        let mut max = 1;
        for layer in &self.layers {
            let s_in = layer.inputs.iter().map(|i| stride[i.as_str()]).max().unwrap_or(1);
            let s = match layer.kind {
                LayerKind::Upsample2x => s_in / 2,
                _ => s_in * layer.geom.map_or(1, |g| g.stride),
            };
            max = max.max(s);
            stride.insert(&layer.name, s.max(1));
        }
        max
    }

    /// Stride of the finest prediction.
    pub fn finest_stride(&self) -> usize {
        self.scales.iter().map(|(s, _)| *s).min().unwrap_or(1)
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().map(|l| l.convs().len()).sum()
    }

    /// First convolution reading the image; it keeps 8-bit weights.
    pub fn first_conv_layer(&self) -> Option<&str> {
        let input = &self.input_layer().name;
        self.layers.iter().find(|l| l.geom.is_some() && l.inputs.first() == Some(input)).map(|l| l.name.as_str())
    }

    /// Sets every layer's bit-widths; the first conv keeps 8-bit weights and
    /// the image stays 8-bit unless the whole net becomes full precision.
    pub fn set_bit_widths(&mut self, bits: BitWidths) -> Result<()> {
        let body = QuantSpec::new(bits.k_w, bits.k_a)?;
        let first = first_layer_quant(bits)?;
        let input = QuantSpec::new(FULL_PRECISION, first_layer_input_bits(bits))?;
        let first_name = self.first_conv_layer().map(str::to_string);
        for layer in &mut self.layers {
            layer.quant = if layer.kind == LayerKind::Input {
                input
            } else if Some(&layer.name) == first_name.as_ref() {
                first
            } else {
                body
            };
        }
        Ok(())
    }

    /// Bit-widths of the non-first layers (taken from the last conv layer).
    pub fn body_bits(&self) -> BitWidths {
        self.layers
            .iter()
            .rev()
            .find(|l| l.geom.is_some())
            .map_or(BitWidths::FULL, |l| BitWidths::new(l.quant.k_w, l.quant.k_a))
    }

    /// Multiply-accumulates plus element-wise additions for one `h × w` image.
    pub fn ops_per_forward(&self, h: usize, w: usize) -> u64 {
        exec::count_ops(self, h, w)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter and buffer whose name starts with one of `prefixes`.
    pub fn copy_from(&mut self, other: &SegNet, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        let matches = |name: &str| prefixes.iter().any(|p| name == *p || name.starts_with(&format!("{p}.")));
        for (store, src) in [(&mut self.params, &other.params), (&mut self.buffers, &other.buffers)] {
            for (name, t) in src.iter().filter(|(n, _)| matches(n)) {
                let dst = store
                    .get_mut(name)
                    .ok_or_else(|| Error::MissingAsset(format!("parameter {name} absent in target net")))?;
                dst.same_shape(t)?;
                *dst = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &BTreeMap<String, (Tensor, Tensor)>, momentum: f64) {
        for (prefix, (mean, var)) in stats {
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                if let Some(run) = self.buffers.get_mut(&format!("{prefix}.{suffix}")) {
                    for (r, b) in run.data.iter_mut().zip(&batch.data) {
                        *r = (1.0 - momentum) * *r + momentum * b;
                    }
                }
            }
        }
    }

    /// Bias and batch-norm channel count after folding BN into a per-channel affine.
    pub fn affine_param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| {
                l.convs()
                    .into_iter()
                    .map(move |(_, g)| if l.kind == LayerKind::PredictHead { g.out_ch } else { 2 * g.out_ch })
            })
            .sum()
    }

    pub fn conv_weight_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.convs()).map(|(_, g)| g.weight_shape().iter().product::<usize>()).sum()
    }
}

/// Loss, parameter gradients and batch statistics of one training batch.
pub fn compute_gradients(
    net: &SegNet,
    image: &Tensor,
    labels: &[LabelMap],
    active_scales: &[usize],
    class_weights: &[f64],
    opts: &ForwardOptions,
) -> Result<(f64, Grads, BTreeMap<String, (Tensor, Tensor)>)> {
    let opts = ForwardOptions { keep_cache: true, scales: Some(active_scales.to_vec()), ..opts.clone() };
    let fwd = forward(net, image, &opts)?;
    let (loss, dlogits) = stagewise_loss_with_grad(&fwd.logits, labels, active_scales, class_weights)?;
    let grads = backward(net, &fwd, &dlogits)?;
    Ok((loss, grads, fwd.batch_stats))
}

/// Arg-max class map at the finest scale, one per batch item.
pub fn predict(net: &SegNet, image: &Tensor, backend: ConvBackend) -> Result<Vec<LabelMap>> {
    let stride = net.finest_stride();
    let fwd = forward(net, image, &ForwardOptions::eval().with_backend(backend).with_scales(&[stride]))?;
    let z = &fwd.logits[&stride];
    let [n, c, h, w] = z.shape;
    let mut maps = Vec::with_capacity(n);
    for b in 0..n {
        let mut m = LabelMap::filled(h, w, 0);
        for pos in 0..h * w {
            let mut best = 0;
            for ch in 1..c {
                if z.data[(b * c + ch) * h * w + pos] > z.data[(b * c + best) * h * w + pos] {
                    best = ch;
                }
            }
            m.data[pos] = best as u8;
        }
        maps.push(m);
    }
    Ok(maps)
}

/// Names of the extractor layers (everything before the reconstruction branches).
pub const EXTRACTOR_LAYERS: [&str; 4] = ["stem", "stage1", "stage2", "stage3"];

#[cfg(test)]
mod tests;
