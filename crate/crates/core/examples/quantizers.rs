//! Activation and weight quantizers, their error bound, and bit-width
//! allocation under a fixed kernel budget.
//!
//! cargo run --example quantizers

use bfcn::quantize::{dequantize_weight_code, quantize_unit, quantizer_max_error};
use bfcn::trainer::{allocation_error, optimal_allocation};

fn main() -> bfcn::Result<()> {
    for k in [1, 2, 4, 8] {
        let samples: Vec<String> =
            [0.1, 0.37, 0.5, 0.93].iter().map(|&x| format!("{x}->{:.4}", quantize_unit(x, k).unwrap().1)).collect();
        println!("k={k}: max error {:.5}  {}", quantizer_max_error(k), samples.join(" "));
    }

    let grid: Vec<String> = (0..4).map(|c| format!("{:+.4}", dequantize_weight_code(c, 2))).collect();
    println!("2-bit weight grid: {}", grid.join(" "));

    println!("\nbudget  best (k_w, k_a)  error");
    for budget in [1, 2, 4, 8, 9, 16, 64] {
        let (kw, ka) = optimal_allocation(budget);
        println!("{budget:>6}  ({kw}, {ka}){:>10.4}", allocation_error(kw, ka));
    }
    println!("(1, 4) costs as much as (2, 2) but errs {} vs {}", allocation_error(1, 4), allocation_error(2, 2));
    Ok(())
}
