//! m-bit × n-bit convolution assembled from m·n binary popcount passes.
//!
//! For activation codes `A = Σ_i 2^i A_i` and weight codes `B = Σ_j 2^j B_j`
//! the window dot product is `Σ_{i,j} 2^{i+j} popcount(A_i & B_j)`. Each
//! `(i, j)` plane pair is one binary convolution pass over the whole output.
//!
//! Windows are lowered im2col-style at the bit level: every plane is first
//! re-packed pixel-major with the channel bits of a pixel in `ceil(C/64)`
//! consecutive words, so that extracting a window is a copy of `kh·kw` word
//! groups and the inner loop is a word-aligned `and` + popcount.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::bitpack::{popcount_and, popcount_xor, words_for, BitPlaneTensor, WORD_BITS};
use crate::error::{Error, Result};
use crate::quantize::{is_full_precision, levels, QuantSpec};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let g = ConvGeom { in_ch, out_ch, kh: k, kw: k, stride, pad };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::BadConfig(format!("non-positive conv geometry {self:?}")));
        }
        if self.pad >= self.kh.max(self.kw) {
            return Err(Error::BadConfig(format!("padding {} >= kernel extent", self.pad)));
        }
        Ok(())
    }

    pub fn n_taps(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kh || pw < self.kw {
            return Err(Error::ShapeMismatch(format!("input {h}x{w} smaller than kernel")));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    /// Multiply-accumulates for one image of `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_hw(h, w).unwrap_or((0, 0));
        (oh * ow * self.out_ch * self.n_taps()) as u64
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        if shape[1] != self.in_ch {
            return Err(Error::ShapeMismatch(format!("input has {} channels, conv expects {}", shape[1], self.in_ch)));
        }
        Ok(())
    }

    fn check_weights(&self, shape: [usize; 4]) -> Result<()> {
        if shape != self.weight_shape() {
            return Err(Error::ShapeMismatch(format!("weights {:?}, conv expects {:?}", shape, self.weight_shape())));
        }
        Ok(())
    }
}

/// Raw integer sums `Σ A·B` of a bit convolution, `(N, out_ch, H', W')`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntAccumulatorMap {
    pub shape: [usize; 4],
    pub data: Vec<i64>,
}

/// Counts binary convolution passes (one per activation/weight plane pair).
#[derive(Debug, Default)]
pub struct KernelCounter {
    passes: AtomicU64,
}

impl KernelCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    fn record(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }
}

/// Number of binary kernels needed for `k_w`-bit weights and `k_a`-bit activations.
pub fn kernel_count(k_w: u32, k_a: u32) -> u32 {
    k_w * k_a
}

/// One activation plane lowered to per-output windows.
struct Windows {
    words_per_window: usize,
    words: Vec<u64>,
}

impl Windows {
    #[inline]
    fn window(&self, p: usize) -> &[u64] {
        &self.words[p * self.words_per_window..(p + 1) * self.words_per_window]
    }
}

struct Lowered {
    /// One entry per activation plane.
    windows: Vec<Windows>,
    /// One entry per weight plane; filter `o` occupies `words_per_window` words.
    filters: Vec<Vec<u64>>,
    out_shape: [usize; 4],
}

fn lower(acts: &BitPlaneTensor, weights: &BitPlaneTensor, geom: &ConvGeom) -> Result<Lowered> {
    geom.validate()?;
    let [n, c, h, w] = acts.shape();
    geom.check_input(acts.shape())?;
    geom.check_weights(weights.shape())?;
    let bound = geom.n_taps() as u128 * levels(acts.bits()) as u128 * levels(weights.bits()) as u128;
    if bound > 1u128 << 62 {
        return Err(Error::AccumulatorOverflowRisk(bound));
    }
    let (oh, ow) = geom.out_hw(h, w)?;
    let cw = words_for(c);
    let taps = geom.kh * geom.kw;
    let wpw = taps * cw;

    let mut windows = Vec::with_capacity(acts.bits() as usize);
    for plane in acts.planes() {
        // Pixel-major repack: pixel (n, y, x) owns cw words of channel bits.
        let mut pix = vec![0u64; n * h * w * cw];
        let src = plane.words();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let (word, bit) = (ch / WORD_BITS, ch % WORD_BITS);
                for q in 0..h * w {
                    let i = base + q;
                    pix[(b * h * w + q) * cw + word] |= ((src[i / WORD_BITS] >> (i % WORD_BITS)) & 1) << bit;
                }
            }
        }
        let mut words = vec![0u64; n * oh * ow * wpw];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((b * oh + oy) * ow + ox) * wpw;
                    for ky in 0..geom.kh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..geom.kw {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * cw;
                            let dst = base + (ky * geom.kw + kx) * cw;
                            words[dst..dst + cw].copy_from_slice(&pix[src..src + cw]);
                        }
                    }
                }
            }
        }
        windows.push(Windows { words_per_window: wpw, words });
    }

    let mut filters = Vec::with_capacity(weights.bits() as usize);
    for plane in weights.planes() {
        let src = plane.words();
        let mut f = vec![0u64; geom.out_ch * wpw];
        let mut i = 0;
        for o in 0..geom.out_ch {
            for ch in 0..c {
                let (word, bit) = (ch / WORD_BITS, ch % WORD_BITS);
                for tap in 0..taps {
                    f[o * wpw + tap * cw + word] |= ((src[i / WORD_BITS] >> (i % WORD_BITS)) & 1) << bit;
                    i += 1;
                }
            }
        }
        filters.push(f);
    }
    Ok(Lowered { windows, filters, out_shape: [n, geom.out_ch, oh, ow] })
}

/// Integer convolution of activation codes with weight codes via bit planes.
pub fn bitconv2d(acts: &BitPlaneTensor, weights: &BitPlaneTensor, geom: &ConvGeom) -> Result<IntAccumulatorMap> {
    bitconv2d_counted(acts, weights, geom, &KernelCounter::new())
}

/// [`bitconv2d`] that records every binary pass in `counter`.
pub fn bitconv2d_counted(
    acts: &BitPlaneTensor,
    weights: &BitPlaneTensor,
    geom: &ConvGeom,
    counter: &KernelCounter,
) -> Result<IntAccumulatorMap> {
    let lowered = lower(acts, weights, geom)?;
    Ok(accumulate(&lowered, geom.out_ch, counter))
}

/// Accumulator map plus per-window activation code sums, from one lowering.
pub(crate) fn bitconv2d_with_sums(
    acts: &BitPlaneTensor,
    weights: &BitPlaneTensor,
    geom: &ConvGeom,
    counter: &KernelCounter,
) -> Result<(IntAccumulatorMap, Vec<i64>)> {
    let lowered = lower(acts, weights, geom)?;
    let [n, _, oh, ow] = lowered.out_shape;
    let mut sums = vec![0i64; n * oh * ow];
    for (i, win) in lowered.windows.iter().enumerate() {
        for (p, s) in sums.iter_mut().enumerate() {
            *s += (win.window(p).iter().map(|w| w.count_ones() as i64).sum::<i64>()) << i;
        }
    }
    Ok((accumulate(&lowered, geom.out_ch, counter), sums))
}

const POSITION_TILE: usize = 128;

fn accumulate(lowered: &Lowered, out_ch: usize, counter: &KernelCounter) -> IntAccumulatorMap {
    let [n, _, oh, ow] = lowered.out_shape;
    let positions = oh * ow;
    let mut data = vec![0i64; n * out_ch * positions];
    for (i, win) in lowered.windows.iter().enumerate() {
        let wpw = win.words_per_window;
        for (j, filters) in lowered.filters.iter().enumerate() {
            counter.record();
            let shift = i + j;
            for b in 0..n {
                // Tiles of output positions keep their windows cache-resident across filters.
                for start in (0..positions).step_by(POSITION_TILE) {
                    let len = POSITION_TILE.min(positions - start);
                    let windows = &win.words[(b * positions + start) * wpw..][..len * wpw];
                    for (o, filt) in filters.chunks_exact(wpw).enumerate() {
                        let out = &mut data[(b * out_ch + o) * positions + start..][..len];
                        for (slot, window) in out.iter_mut().zip(windows.chunks_exact(wpw)) {
                            *slot += (popcount_and(window, filt) as i64) << shift;
                        }
                    }
                }
            }
        }
    }
    IntAccumulatorMap { shape: lowered.out_shape, data }
}

/// Sum of activation codes under every output window, `(N·H'·W')` entries.
pub fn act_window_sums(acts: &BitPlaneTensor, geom: &ConvGeom) -> Result<Vec<i64>> {
    let [n, c, h, w] = acts.shape();
    geom.check_input(acts.shape())?;
    let (oh, ow) = geom.out_hw(h, w)?;
    let mut sums = vec![0i64; n * oh * ow];
    for (i, plane) in acts.planes().iter().enumerate() {
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut count = 0i64;
                    for ch in 0..c {
                        for ky in 0..geom.kh {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..geom.kw {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    let p = ((b * c + ch) * h + iy as usize) * w + ix as usize;
                                    count += plane.get(p) as i64;
                                }
                            }
                        }
                    }
                    sums[(b * oh + oy) * ow + ox] += count << i;
                }
            }
        }
    }
    Ok(sums)
}

/// Sum of weight codes of every filter, `out_ch` entries.
pub fn weight_code_sums(weights: &BitPlaneTensor) -> Vec<i64> {
    let [o, c, kh, kw] = weights.shape();
    let per = c * kh * kw;
    (0..o)
        .map(|f| {
            weights
                .planes()
                .iter()
                .enumerate()
                .map(|(j, plane)| ((f * per..(f + 1) * per).filter(|&p| plane.get(p)).count() as i64) << j)
                .sum()
        })
        .collect()
}

/// Converts raw code sums back to real convolution outputs.
///
/// With activations `a = a_scale·(code - a_zero)` and weights
/// `w = w_scale·code - 1`, each output is
/// `a_scale·(w_scale·(acc - a_zero·Σw) - (Σa - n_taps·a_zero))`. The sum is
/// formed exactly in integers over the common denominator `(2^k_a-1)(2^k_w-1)`
/// and divided once.
pub fn dequantize_conv(
    acc: &IntAccumulatorMap,
    spec: &QuantSpec,
    act_window_sums: &[i64],
    weight_code_sums: &[i64],
    n_taps: usize,
) -> Result<Tensor> {
    if is_full_precision(spec.k_w) || is_full_precision(spec.k_a) {
        return Err(Error::BadConfig("dequantize_conv needs quantized bit-widths".into()));
    }
    let [n, o, oh, ow] = acc.shape;
    if act_window_sums.len() != n * oh * ow {
        return Err(Error::ShapeMismatch(format!("{} window sums for {} windows", act_window_sums.len(), n * oh * ow)));
    }
    if weight_code_sums.len() != o {
        return Err(Error::ShapeMismatch(format!("{} filter sums for {o} filters", weight_code_sums.len())));
    }
    let lw = levels(spec.k_w) as i128;
    let la = levels(spec.k_a) as i128;
    let az = spec.a_zero as i128;
    let denom = (la * lw) as f64;
    let mut data = Vec::with_capacity(acc.data.len());
    for b in 0..n {
        for (f, &wsum) in weight_code_sums.iter().enumerate() {
            for pos in 0..oh * ow {
                let a = acc.data[(b * o + f) * oh * ow + pos] as i128;
                let asum = act_window_sums[b * oh * ow + pos] as i128;
                let num = 2 * (a - az * wsum as i128) - lw * (asum - n_taps as i128 * az);
                data.push(num as f64 / denom);
            }
        }
    }
    Ok(Tensor { shape: acc.shape, data })
}

/// Exact integer reference for the weight-sign path with 1-bit weights:
/// `Σ a_code · (2·w_code - 1)` computed through signed xor popcounts.
pub fn bitconv2d_signed_weights(
    acts: &BitPlaneTensor,
    weights: &BitPlaneTensor,
    geom: &ConvGeom,
) -> Result<IntAccumulatorMap> {
    if weights.bits() != 1 {
        return Err(Error::BitWidthMismatch { expected: 1, found: weights.bits() });
    }
    let lowered = lower(acts, weights, geom)?;
    let [n, _, oh, ow] = lowered.out_shape;
    let positions = oh * ow;
    let filters = &lowered.filters[0];
    let mut data = vec![0i64; n * geom.out_ch * positions];
    for (i, win) in lowered.windows.iter().enumerate() {
        let wpw = win.words_per_window;
        let len = (wpw * WORD_BITS) as i64;
        for (o, filt) in filters.chunks_exact(wpw).enumerate() {
            let filt_signed_sum = 2 * filt.iter().map(|w| w.count_ones() as i64).sum::<i64>() - len;
            for b in 0..n {
                for pos in 0..positions {
                    // Signed dot over the padded window length.
                    let signed = len - 2 * popcount_xor(win.window(b * positions + pos), filt) as i64;
                    let contrib = (signed + filt_signed_sum) / 2;
                    data[(b * geom.out_ch + o) * positions + pos] += contrib << i;
                }
            }
        }
    }
    Ok(IntAccumulatorMap { shape: lowered.out_shape, data })
}

/// Error-free transformation `a·b = p + e` (requires fused multiply-add).
#[inline]
fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Compensated accumulator; results are as accurate as twice-working precision.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    err: f64,
}

impl CompensatedSum {
    #[inline]
    fn add_product(&mut self, a: f64, b: f64) {
        let (p, pe) = two_product(a, b);
        let s = self.sum + p;
        let bb = s - self.sum;
        let se = (self.sum - (s - bb)) + (p - bb);
        self.sum = s;
        self.err += se + pe;
    }

    fn value(&self) -> f64 {
        self.sum + self.err
    }
}

/// Direct convolution in real arithmetic; the correctness anchor for the
/// bit kernels. Also returns `Σ|a·w|` per output, the magnitude scale used
/// when comparing results in ulps.
pub fn conv2d_reference_with_magnitude(acts: &Tensor, weights: &Tensor, geom: &ConvGeom) -> Result<(Tensor, Tensor)> {
    geom.validate()?;
    geom.check_input(acts.shape)?;
    geom.check_weights(weights.shape)?;
    let [n, c, h, w] = acts.shape;
    let (oh, ow) = geom.out_hw(h, w)?;
    let shape = [n, geom.out_ch, oh, ow];
    let mut out = Tensor::zeros(shape);
    let mut mag = Tensor::zeros(shape);
    for b in 0..n {
        for o in 0..geom.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = CompensatedSum::default();
                    let mut abs = 0.0;
                    for ch in 0..c {
                        for ky in 0..geom.kh {
                            for kx in 0..geom.kw {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let a = acts.at(b, ch, iy as usize, ix as usize);
                                let wt = weights.at(o, ch, ky, kx);
                                acc.add_product(a, wt);
                                abs += (a * wt).abs();
                            }
                        }
                    }
                    let idx = out.index(b, o, oy, ox);
                    out.data[idx] = acc.value();
                    mag.data[idx] = abs;
                }
            }
        }
    }
    Ok((out, mag))
}

pub fn conv2d_reference(acts: &Tensor, weights: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    Ok(conv2d_reference_with_magnitude(acts, weights, geom)?.0)
}

/// Spacing of doubles at `|x|` (the value of one unit in the last place).
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 || !x.is_finite() {
        return f64::MIN_POSITIVE * f64::EPSILON;
    }
    let next = f64::from_bits(x.to_bits() + 1);
    next - x
}

/// Distance between `a` and `b` in ulps at the larger of `|b|` and `scale`.
///
/// A dot product of rounded inputs can only be compared in ulps of the
/// magnitude it accumulated, since cancellation leaves results near zero.
pub fn ulps_at_scale(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / ulp(b.abs().max(scale))
}
