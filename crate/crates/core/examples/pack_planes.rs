//! Quantize a small activation tensor, split it into bit planes, and round-trip
//! it through the BTSR container.
//!
//! cargo run --example pack_planes

use bfcn::bitpack::{bit_dot_signed, bit_dot_unsigned, pack, read_btsr, unpack, write_btsr, BitPlane, BtsrBlock};
use bfcn::quantize::quantize_activations;
use bfcn::tensor::Tensor;

fn main() -> bfcn::Result<()> {
    let x = Tensor::from_vec([1, 2, 2, 3], vec![0.0, 0.1, 0.3, 0.5, 0.7, 1.0, -0.4, 0.2, 0.45, 0.66, 0.9, 1.3])?;
    let q = quantize_activations(&x, 2)?;
    println!("2-bit codes: {:?}", q.codes.codes);

    let planes = pack(&q.codes, 2)?;
    for (i, plane) in planes.planes().iter().enumerate() {
        let bits: String = (0..plane.len()).map(|j| if plane.get(j) { '1' } else { '0' }).collect();
        println!("plane {i} (weight 2^{i}): {bits}");
    }
    assert_eq!(unpack(&planes), q.codes);

    let mut buf = Vec::new();
    write_btsr(&mut buf, &planes)?;
    println!("BTSR block: {} bytes", buf.len());
    match read_btsr(&mut buf.as_slice())? {
        BtsrBlock::Planes(back) => assert_eq!(back, planes),
        BtsrBlock::Float { .. } => unreachable!(),
    }

    // {0,1} dot products are AND-popcounts; {-1,+1} ones are n - 2·popcount(xor).
    let a = BitPlane::from_bits(&[true, false, true, true, false]);
    let b = BitPlane::from_bits(&[true, true, false, true, false]);
    println!("unsigned dot {} signed dot {}", bit_dot_unsigned(&a, &b)?, bit_dot_signed(&a, &b)?);
    Ok(())
}
