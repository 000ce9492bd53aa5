//! Run one low bit-width convolution on bit planes and check it against the
//! float reference on the dequantized tensors.
//!
//! cargo run --release --example bit_conv

use bfcn::bitconv::{
    act_window_sums, bitconv2d_counted, conv2d_reference, dequantize_conv, kernel_count, weight_code_sums, ConvGeom,
    KernelCounter,
};
use bfcn::bitpack::pack;
use bfcn::quantize::{quantize_activations, quantize_weights, QuantSpec};
use bfcn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bfcn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let geom = ConvGeom::new(16, 8, 3, 1, 1)?;
    let x = Tensor::from_vec([1, 16, 12, 12], (0..16 * 144).map(|_| rng.gen()).collect())?;
    let w = Tensor::from_vec(geom.weight_shape(), (0..8 * 16 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    for (k_w, k_a) in [(1, 2), (2, 2), (4, 4)] {
        let qa = quantize_activations(&x, k_a)?;
        let qw = quantize_weights(&w, k_w)?;
        let (pa, pw) = (pack(&qa.codes, k_a)?, pack(&qw.codes, k_w)?);

        let counter = KernelCounter::new();
        let acc = bitconv2d_counted(&pa, &pw, &geom, &counter)?;
        let spec = QuantSpec::new(k_w, k_a)?;
        let y = dequantize_conv(&acc, &spec, &act_window_sums(&pa, &geom)?, &weight_code_sums(&pw), geom.n_taps())?;

        let reference = conv2d_reference(&qa.dequantize(), &qw.dequantize(), &geom)?;
        println!(
            "{k_w}-{k_a}: {} binary passes (expected {}), max |bit - float| = {:.2e}",
            counter.passes(),
            kernel_count(k_w, k_a),
            y.max_abs_diff(&reference)
        );
    }
    Ok(())
}
