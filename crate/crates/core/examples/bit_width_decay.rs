//! Quantize a trained full-precision net gradually, one bit per step from
//! 8 bits down to 2, and compare with quantizing in one jump.
//!
//! cargo run --release --example bit_width_decay

use bfcn::dataset::{Dataset, SceneConfig};
use bfcn::graph::{BitWidths, NetConfig, ReconVariant};
use bfcn::trainer::{decay_sequence, run_experiment, Experiment, Route, RouteAssets, TrainConfig};

fn main() -> bfcn::Result<()> {
    let data = Dataset::generate(2, 256, 64, &SceneConfig::new(64, 64, 5))?;
    let exp = Experiment {
        net: NetConfig {
            in_ch: 3,
            num_classes: 5,
            base_width: 8,
            variant: ReconVariant::ResidualBlock,
            bits: BitWidths::uniform(2),
        },
        route: Route::P1With8Bit,
        decay_rate: Some(1),
        pretrain_iters: 50,
        fcn_iters: 300,
        fine_tune_iters: 60,
        train: TrainConfig { seed: 2, ..TrainConfig::default() },
    };
    let sched = exp.route.decay_schedule(2, exp.decay_rate, exp.fine_tune_iters).expect("decaying route");
    println!("schedule {:?}", decay_sequence(&sched)?);

    // Both runs start from the same trained full-precision net.
    let mut assets = RouteAssets::default();
    let decayed = run_experiment(&exp, &data, &mut assets)?;
    for step in &decayed.decay.as_ref().expect("decay ran").steps {
        println!("{:>6}  loss {:.3}  val mIoU {:.3}", step.bits.to_string(), step.train_loss, step.val_miou);
    }
    let direct = run_experiment(&Experiment { decay_rate: None, ..exp.clone() }, &data, &mut assets)?;
    let seq: Vec<String> = direct.bit_sequence.iter().map(ToString::to_string).collect();
    println!("decay 1: {:.3}   direct ({}): {:.3}", decayed.val_miou, seq.join(" -> "), direct.val_miou);
    Ok(())
}
