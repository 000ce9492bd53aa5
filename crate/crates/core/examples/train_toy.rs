//! Train a full-precision segmentation net on the toy scenes, switch it to
//! 2-bit weights and activations, and score both on the bit kernels.
//!
//! cargo run --release --example train_toy

use std::collections::BTreeMap;

use bfcn::dataset::{mean_iou, Dataset, SceneConfig, Split};
use bfcn::graph::{build_toy_bfcn, predict, save_model, BitWidths, ConvBackend, NetConfig, ReconVariant};
use bfcn::trainer::{evaluate, train, TrainConfig, TrainLog};

fn main() -> bfcn::Result<()> {
    let data = Dataset::generate(3, 128, 32, &SceneConfig::new(64, 64, 5))?;
    let cfg = NetConfig {
        in_ch: 3,
        num_classes: 5,
        base_width: 8,
        variant: ReconVariant::ResidualBlock,
        bits: BitWidths::FULL,
    };
    let mut net = build_toy_bfcn(&cfg, 3)?;
    println!("{} parameters, {} ops per 64x64 forward", net.param_count(), net.ops_per_forward(64, 64));

    let tc = TrainConfig { iters: 300, seed: 3, ..TrainConfig::default() };
    let mut velocity = BTreeMap::new();
    let mut log = TrainLog::default();
    train(&mut net, &data, &tc, &mut velocity, &mut log)?;
    println!("loss {:.3} -> {:.3}", log.entries[0].loss, log.recent_loss(20));

    let val = data.split(Split::Val);
    let fp = mean_iou(&evaluate(&net, val, ConvBackend::Float)?)?;
    println!("full precision val mIoU {fp:.3}");

    net.set_bit_widths(BitWidths::uniform(2))?;
    train(&mut net, &data, &TrainConfig { iters: 100, ..tc.all_scales(100) }, &mut velocity, &mut log)?;
    let cm = evaluate(&net, val, ConvBackend::Bit)?;
    println!("2-2 val mIoU on bit kernels {:.3}", mean_iou(&cm)?);
    print!("{}", cm.to_tsv());

    let labels = predict(&net, &val[0].image, ConvBackend::Bit)?;
    println!("first prediction is {}x{}", labels[0].height, labels[0].width);
    let path = std::env::temp_dir().join("bfcn-toy-2-2.bfcn");
    save_model(&path, &net, Some(&velocity))?;
    println!("saved {}", path.display());
    Ok(())
}
