//! Time the bit kernels against the float convolution and compare with the
//! analytic cost model.
//!
//! cargo run --release --example bench_kernels -- 1,64,32,32

use bfcn::bench::{parameter_size, run_bench, BenchConfig, BenchShape};
use bfcn::graph::{build_toy_bfcn, BitWidths, NetConfig, ReconVariant};

fn main() -> bfcn::Result<()> {
    let shape = match std::env::args().nth(1) {
        Some(s) => BenchShape::parse(&s)?,
        None => BenchShape::default(),
    };
    let report = run_bench(&shape, &BenchConfig::parse_list("1x1,1x2,2x2,4x4,8x8")?, 20)?;
    print!("{}", report.to_table());
    let b = |k_w, k_a| BenchConfig::Bits { k_w, k_a };
    println!(
        "t(2,2)/t(1,2) = {:.2}, t(4,4)/t(2,2) = {:.2}",
        report.time_ratio(b(2, 2), b(1, 2)).unwrap(),
        report.time_ratio(b(4, 4), b(2, 2)).unwrap()
    );

    println!("\nstorage of a width-32 net:");
    for k in [32, 8, 4, 2, 1] {
        let bits = if k == 32 { BitWidths::FULL } else { BitWidths::new(k, 2) };
        let net = build_toy_bfcn(
            &NetConfig { in_ch: 3, num_classes: 5, base_width: 32, variant: ReconVariant::ResidualBlock, bits },
            0,
        )?;
        println!("  k_w={k:<2} {:>9} bytes", parameter_size(&net));
    }
    Ok(())
}
