//! Uniform quantizers for weights and activations and the straight-through
//! estimator used to train through them.
//!
//! Activations live in `[0, 1]` and map to codes `round((2^k-1)·a)`.
//! Weights live in `[-1, 1]`; they are shifted to `[0, 1]`, quantized the same
//! way, and dequantize as `code·2/(2^k-1) - 1`. Ties round away from zero.

use crate::bitpack::check_bits;
use crate::error::Result;
use crate::tensor::{CodeTensor, Tensor};

/// Bit-width value meaning "full precision, do not quantize".
pub const FULL_PRECISION: u32 = 32;

pub fn is_full_precision(k: u32) -> bool {
    k == FULL_PRECISION
}

/// `2^k - 1`, the largest code of a k-bit quantizer.
#[inline]
pub fn levels(k: u32) -> u32 {
    (1u32 << k) - 1
}

/// Per-layer quantization parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub k_w: u32,
    pub k_a: u32,
    pub w_scale: f64,
    /// Half-integer zero point `(2^k_w - 1)/2`; dequantized weight is
    /// `(code - w_zero)·w_scale = code·w_scale - 1`.
    pub w_zero: f64,
    pub a_scale: f64,
    pub a_zero: u32,
}

impl QuantSpec {
    pub fn new(k_w: u32, k_a: u32) -> Result<Self> {
        for k in [k_w, k_a] {
            if !is_full_precision(k) {
                check_bits(k)?;
            }
        }
        let (w_scale, w_zero) =
            if is_full_precision(k_w) { (1.0, 0.0) } else { (2.0 / levels(k_w) as f64, levels(k_w) as f64 / 2.0) };
        let a_scale = if is_full_precision(k_a) { 1.0 } else { 1.0 / levels(k_a) as f64 };
        Ok(QuantSpec { k_w, k_a, w_scale, w_zero, a_scale, a_zero: 0 })
    }

    pub fn full_precision() -> Self {
        Self::new(FULL_PRECISION, FULL_PRECISION).expect("full precision is valid")
    }

    pub fn is_full_precision(&self) -> bool {
        is_full_precision(self.k_w) && is_full_precision(self.k_a)
    }
}

/// Quantizes `x` (clamped to `[0, 1]`) to a k-bit code and its value.
pub fn quantize_unit(x: f64, k: u32) -> Result<(u8, f64)> {
    check_bits(k)?;
    Ok(quantize_unit_unchecked(x, k))
}

#[inline]
pub(crate) fn quantize_unit_unchecked(x: f64, k: u32) -> (u8, f64) {
    let l = levels(k) as f64;
    // f64::round rounds half away from zero.
    let code = (x.clamp(0.0, 1.0) * l).round() as u8;
    (code, code as f64 / l)
}

#[inline]
pub fn dequantize_weight_code(code: u8, k: u32) -> f64 {
    (2 * code as i32 - levels(k) as i32) as f64 / levels(k) as f64
}

#[inline]
pub fn dequantize_activation_code(code: u8, k: u32) -> f64 {
    code as f64 / levels(k) as f64
}

#[inline]
pub(crate) fn weight_code(w: f64, k: u32) -> u8 {
    quantize_unit_unchecked((w.clamp(-1.0, 1.0) + 1.0) / 2.0, k).0
}

/// Weight codes plus the weight half of a [`QuantSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    pub codes: CodeTensor,
    pub k: u32,
    pub w_scale: f64,
    pub w_zero: f64,
}

impl QuantizedWeights {
    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.codes.shape,
            data: self.codes.codes.iter().map(|&c| dequantize_weight_code(c, self.k)).collect(),
        }
    }
}

pub fn quantize_weights(w: &Tensor, k: u32) -> Result<QuantizedWeights> {
    check_bits(k)?;
    let codes = w.data.iter().map(|&x| weight_code(x, k)).collect();
    Ok(QuantizedWeights {
        codes: CodeTensor { shape: w.shape, codes },
        k,
        w_scale: 2.0 / levels(k) as f64,
        w_zero: levels(k) as f64 / 2.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivations {
    pub codes: CodeTensor,
    pub k: u32,
    pub a_scale: f64,
}

impl QuantizedActivations {
    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.codes.shape,
            data: self.codes.codes.iter().map(|&c| dequantize_activation_code(c, self.k)).collect(),
        }
    }
}

pub fn quantize_activations(a: &Tensor, k: u32) -> Result<QuantizedActivations> {
    check_bits(k)?;
    let codes = a.data.iter().map(|&x| quantize_unit_unchecked(x, k).0).collect();
    Ok(QuantizedActivations { codes: CodeTensor { shape: a.shape, codes }, k, a_scale: 1.0 / levels(k) as f64 })
}

/// Quantize-dequantize of weights; full precision passes through untouched.
pub fn fake_quantize_weights(w: &Tensor, k: u32) -> Result<Tensor> {
    if is_full_precision(k) {
        return Ok(w.clone());
    }
    Ok(quantize_weights(w, k)?.dequantize())
}

/// Clamp to `[0, 1]` then quantize-dequantize; full precision only clamps.
pub fn fake_quantize_activations(a: &Tensor, k: u32) -> Result<Tensor> {
    if is_full_precision(k) {
        return Ok(a.map(|x| x.clamp(0.0, 1.0)));
    }
    check_bits(k)?;
    Ok(a.map(|x| quantize_unit_unchecked(x, k).1))
}

/// Straight-through estimator: passes `upstream` where `lo <= input <= hi`.
pub fn ste_grad(upstream: &Tensor, preclamp_input: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    upstream.same_shape(preclamp_input)?;
    let data = upstream
        .data
        .iter()
        .zip(&preclamp_input.data)
        .map(|(&g, &x)| if (lo..=hi).contains(&x) { g } else { 0.0 })
        .collect();
    Ok(Tensor { shape: upstream.shape, data })
}

/// Error model of k-bit quantization used for bit allocation: `1/2^k`.
pub fn quantization_error_bound(k: u32) -> f64 {
    (-(k as f64)).exp2()
}

/// Worst-case rounding error of [`quantize_unit`]: `1/(2(2^k-1))`.
pub fn quantizer_max_error(k: u32) -> f64 {
    0.5 / levels(k) as f64
}
