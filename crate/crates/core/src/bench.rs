//! Kernel timing against the full-precision baseline, plus the analytic
//! cost and storage models.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::bitconv::{bitconv2d_counted, conv2d_reference, kernel_count, ConvGeom, KernelCounter};
use crate::bitpack::pack;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, SegNet};
use crate::quantize::{dequantize_activation_code, dequantize_weight_code, is_full_precision, levels};
use crate::seed::rng_for;
use crate::tensor::{CodeTensor, Tensor};

pub const WARMUPS: usize = 3;
pub const MIN_REPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Platform {
    Cpu,
    Fpga,
}

/// How many bit operations one floating-point operation is worth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub platform: Platform,
    pub bitops_per_flop: f64,
}

impl CostModel {
    pub const CPU: CostModel = CostModel { platform: Platform::Cpu, bitops_per_flop: 18.0 };
    pub const FPGA: CostModel = CostModel { platform: Platform::Fpga, bitops_per_flop: 1024.0 };
}

/// Ideal speedup of a `k_w × k_a`-bit convolution over 32-bit floats.
pub fn predicted_speedup(k_w: u32, k_a: u32, model: &CostModel) -> f64 {
    model.bitops_per_flop / (k_w as f64 * k_a as f64)
}

/// Bytes to store `net` for inference: packed conv weights at their `k_w`
/// (full precision at 4 bytes) plus 4-byte per-channel affines (batch norm
/// folded to scale and shift, head bias).
pub fn parameter_size(net: &SegNet) -> u64 {
    let mut bytes = 0u64;
    for layer in &net.layers {
        let bits = if is_full_precision(layer.quant.k_w) { 32 } else { layer.quant.k_w as u64 };
        for (_, g) in layer.convs() {
            let count = g.weight_shape().iter().product::<usize>() as u64;
            bytes += (count * bits).div_ceil(8);
            let affine = if layer.kind == LayerKind::PredictHead { g.out_ch } else { 2 * g.out_ch };
            bytes += 4 * affine as u64;
        }
    }
    bytes
}

/// A timed configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchConfig {
    Bits { k_w: u32, k_a: u32 },
    FullPrecision,
}

impl BenchConfig {
    /// Parses `KWxKA` (for example `1x2`) or `fp`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "fp" {
            return Ok(BenchConfig::FullPrecision);
        }
        let (w, a) = s.split_once('x').ok_or_else(|| Error::BadConfig(format!("bench config {s:?}")))?;
        let parse = |v: &str| v.parse::<u32>().map_err(|_| Error::BadConfig(format!("bench config {s:?}")));
        let (k_w, k_a) = (parse(w)?, parse(a)?);
        if !(1..=8).contains(&k_w) || !(1..=8).contains(&k_a) {
            return Err(Error::BadBitWidth(k_w.max(k_a)));
        }
        Ok(BenchConfig::Bits { k_w, k_a })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }

    pub fn label(&self) -> String {
        match self {
            BenchConfig::Bits { k_w, k_a } => format!("{k_w}x{k_a}"),
            BenchConfig::FullPrecision => "fp".into(),
        }
    }
}

/// Input `(N, C, H, W)` and a 3×3, stride-1, same-padded conv to `out_ch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
}

impl BenchShape {
    /// Parses `N,C,H,W`; the conv keeps `C` output channels.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::BadConfig(format!("bench shape {s:?}"))))
            .collect::<Result<_>>()?;
        match v[..] {
            [n, c, h, w] if n > 0 && c > 0 && h >= 3 && w >= 3 => Ok(BenchShape { n, c, h, w, out_ch: c }),
            _ => Err(Error::BadConfig(format!("bench shape {s:?} needs N,C,H,W with H,W >= 3"))),
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom { in_ch: self.c, out_ch: self.out_ch, kh: 3, kw: 3, stride: 1, pad: 1 }
    }

    pub fn describe(&self) -> String {
        format!("{}x{}x{}x{} -> {} (3x3)", self.n, self.c, self.h, self.w, self.out_ch)
    }
}

impl Default for BenchShape {
    fn default() -> Self {
        BenchShape { n: 1, c: 64, h: 32, w: 32, out_ch: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub config: BenchConfig,
    pub median_ns: u64,
    pub speedup_vs_fp: f64,
    /// Binary passes of one timed call (0 for the float baseline).
    pub kernel_invocations: u64,
    /// CPU cost-model speedup (1 for the float baseline).
    pub predicted_speedup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub shape: BenchShape,
    pub reps: usize,
    /// Baseline first, then the requested bit configurations in order.
    pub rows: Vec<BenchRow>,
    pub note: String,
}

impl BenchReport {
    pub fn row(&self, config: BenchConfig) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    /// `median(a) / median(b)`.
    pub fn time_ratio(&self, a: BenchConfig, b: BenchConfig) -> Option<f64> {
        Some(self.row(a)?.median_ns as f64 / self.row(b)?.median_ns as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("config\tmedian_ns\tspeedup_vs_fp\tkernel_invocations\tpredicted_speedup\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{}\t{:.4}",
                r.config.label(),
                r.median_ns,
                r.speedup_vs_fp,
                r.kernel_invocations,
                r.predicted_speedup
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s =
            format!("shape {}, {} reps after {WARMUPS} warmups, {}\n", self.shape.describe(), self.reps, self.note);
        let _ = writeln!(s, "{:<7} {:>14} {:>10} {:>8} {:>10}", "config", "median", "vs fp", "kernels", "predicted");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<7} {:>11.3} ms {:>9.2}x {:>8} {:>9.2}x",
                r.config.label(),
                r.median_ns as f64 / 1e6,
                r.speedup_vs_fp,
                r.kernel_invocations,
                r.predicted_speedup
            );
        }
        s
    }
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> u64 {
    for _ in 0..WARMUPS {
        f();
    }
    let mut times: Vec<u64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2].max(1)
}

fn random_codes(shape: [usize; 4], k: u32, seed: u64, name: &str) -> CodeTensor {
    let mut rng = rng_for(seed, name, k as u64);
    let n = shape.iter().product();
    CodeTensor { shape, codes: (0..n).map(|_| rng.gen_range(0..=levels(k)) as u8).collect() }
}

/// Restricts the calling thread to the core it is running on.
#[cfg(target_os = "linux")]
fn pin_current_thread() -> Option<usize> {
    // SAFETY: plain syscalls on a zeroed, correctly sized cpu_set_t for this thread.
    unsafe {
        let cpu = usize::try_from(libc::sched_getcpu()).ok()?;
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        (libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0).then_some(cpu)
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_current_thread() -> Option<usize> {
    None
}

/// Times `bitconv2d` per configuration and the float reference conv on the
/// same shape, single-threaded. The float baseline is always included.
pub fn run_bench(shape: &BenchShape, configs: &[BenchConfig], reps: usize) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::BadConfig(format!("{reps} reps, need at least {MIN_REPS}")));
    }
    let note = match pin_current_thread() {
        Some(cpu) => format!("single thread, pinned to core {cpu}"),
        None => "single thread, core pinning unavailable".to_string(),
    };
    let geom = shape.geom();
    let x_shape = [shape.n, shape.c, shape.h, shape.w];
    let seed = 0x5eed;
    let fp_acts = random_codes(x_shape, 8, seed, "acts");
    let fp_weights = random_codes(geom.weight_shape(), 8, seed, "weights");
    let acts =
        Tensor { shape: x_shape, data: fp_acts.codes.iter().map(|&c| dequantize_activation_code(c, 8)).collect() };
    let weights = Tensor {
        shape: geom.weight_shape(),
        data: fp_weights.codes.iter().map(|&c| dequantize_weight_code(c, 8)).collect(),
    };
    let fp_ns = median_ns(reps, || {
        std::hint::black_box(conv2d_reference(&acts, &weights, &geom).expect("valid shapes"));
    });
    let mut rows = vec![BenchRow {
        config: BenchConfig::FullPrecision,
        median_ns: fp_ns,
        speedup_vs_fp: 1.0,
        kernel_invocations: 0,
        predicted_speedup: 1.0,
    }];
    for &config in configs {
        let BenchConfig::Bits { k_w, k_a } = config else { continue };
        let a = pack(&random_codes(x_shape, k_a, seed, "acts"), k_a)?;
        let w = pack(&random_codes(geom.weight_shape(), k_w, seed, "weights"), k_w)?;
        let counter = KernelCounter::new();
        bitconv2d_counted(&a, &w, &geom, &counter)?;
        let kernel_invocations = counter.passes();
        let ns = median_ns(reps, || {
            std::hint::black_box(bitconv2d_counted(&a, &w, &geom, &counter).expect("valid shapes"));
        });
        debug_assert_eq!(kernel_invocations, kernel_count(k_w, k_a) as u64);
        rows.push(BenchRow {
            config,
            median_ns: ns,
            speedup_vs_fp: fp_ns as f64 / ns as f64,
            kernel_invocations,
            predicted_speedup: predicted_speedup(k_w, k_a, &CostModel::CPU),
        });
    }
    Ok(BenchReport { shape: *shape, reps, rows, note })
}
