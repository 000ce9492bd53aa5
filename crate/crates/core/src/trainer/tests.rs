use super::*;
use crate::dataset::{Dataset, SceneConfig};
use crate::graph::{build_toy_bfcn, BitWidths, NetConfig, ReconVariant};
use proptest::prelude::*;

fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), Tensor::filled([1, 1, 1, 1], v))])
}

#[test]
fn sgd_without_momentum_is_gradient_descent() {
    let mut p = one("w", 1.5);
    let mut v = BTreeMap::new();
    sgd_momentum_step(&mut p, &one("w", 0.25), &mut v, 0.1, 0.0).unwrap();
    assert_eq!(p["w"].data[0], 1.5 - 0.1 * 0.25);
}

#[test]
fn velocity_decays_geometrically_without_gradient() {
    let mut p = one("w", 0.0);
    let mut v = one("w", 1.0);
    for i in 1..=5 {
        sgd_momentum_step(&mut p, &one("w", 0.0), &mut v, 0.1, 0.9).unwrap();
        assert!((v["w"].data[0] - 0.9f64.powi(i)).abs() < 1e-15);
    }
}

#[test]
fn quadratic_matches_scalar_recurrence() {
    // f(p) = 0.5·a·(p − b)^2
    let (a, b, lr, m) = (3.0, -0.7, 0.05, 0.9);
    let mut p = one("w", 2.0);
    let mut vel = BTreeMap::new();
    let (mut ps, mut vs) = (2.0f64, 0.0f64);
    for _ in 0..100 {
        let g = one("w", a * (p["w"].data[0] - b));
        sgd_momentum_step(&mut p, &g, &mut vel, lr, m).unwrap();
        vs = m * vs + a * (ps - b);
        ps -= lr * vs;
        assert_eq!(p["w"].data[0], ps);
    }
}

#[test]
fn sgd_rejects_shape_mismatch() {
    let mut p = one("w", 0.0);
    let g = BTreeMap::from([("w".to_string(), Tensor::zeros([1, 2, 1, 1]))]);
    assert!(matches!(sgd_momentum_step(&mut p, &g, &mut BTreeMap::new(), 0.1, 0.9), Err(Error::ShapeMismatch(_))));
}

#[test]
fn decay_sequence_examples() {
    let seq = |c, r, t| decay_sequence(&DecaySchedule::new(c, r, t, 1)).unwrap();
    assert_eq!(seq(8, 2, 2), vec![8, 6, 4, 2]);
    assert_eq!(seq(8, 3, 2), vec![8, 5, 2]);
    assert_eq!(seq(8, 1, 8), vec![8]);
    assert_eq!(seq(8, 1, 2), vec![8, 7, 6, 5, 4, 3, 2]);
    assert_eq!(seq(8, 4, 2), vec![8, 4, 2]);
    assert!(matches!(decay_sequence(&DecaySchedule::new(4, 1, 6, 1)), Err(Error::BadSchedule(_))));
    assert!(matches!(decay_sequence(&DecaySchedule::new(8, 0, 2, 1)), Err(Error::BadSchedule(_))));
}

#[test]
fn three_epoch_iters_cover_the_training_set() {
    assert_eq!(DecaySchedule::three_epoch_iters(512, 8), 192);
    assert_eq!(DecaySchedule::three_epoch_iters(10, 4), 8);
}

proptest! {
    #[test]
    fn decay_sequence_strictly_decreases_to_target(c in 1u32..=8, r in 1u32..=8, t in 1u32..=8) {
        prop_assume!(t <= c);
        let seq = decay_sequence(&DecaySchedule::new(c, r, t, 1)).unwrap();
        prop_assert_eq!(seq[0], c);
        prop_assert_eq!(*seq.last().unwrap(), t);
        prop_assert!(seq.windows(2).all(|w| w[0] > w[1]));
        for (i, &k) in seq.iter().enumerate().take(seq.len() - 1) {
            prop_assert_eq!(k, c - r * i as u32);
        }
    }
}

#[test]
fn asymmetric_decay_targets() {
    let s = DecaySchedule::new(8, 1, 0, 1);
    let steps = decay_steps(&s, BitWidths::new(1, 2)).unwrap();
    assert_eq!(steps.first(), Some(&BitWidths::uniform(8)));
    assert_eq!(&steps[steps.len() - 2..], &[BitWidths::uniform(2), BitWidths::new(1, 2)]);
    let steps = decay_steps(&DecaySchedule::direct(8, 1, 1), BitWidths::new(4, 1)).unwrap();
    assert_eq!(steps, vec![BitWidths::uniform(8), BitWidths::new(4, 1)]);
}

#[test]
fn class_weight_examples_and_bounds() {
    let w = class_weights(&[0.0, 1.0], 1.4).unwrap();
    assert!((w[0] - 2.9720).abs() < 1e-4);
    assert_eq!(w[1], 1.0 / 2.4f64.ln());
    assert!((w[1] - 1.1417).abs() < 1e-3);
    let ps: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let w = class_weights(&ps, 1.4).unwrap();
    assert!(w.iter().all(|&x| (1.0..=3.0).contains(&x)));
    assert!(w.windows(2).all(|p| p[0] > p[1]));
    assert!(matches!(class_weights(&[0.5], 1.0), Err(Error::BadConstant(_))));
}

#[test]
fn allocation_examples() {
    assert_eq!(allocation_error(2, 2), 0.5);
    assert_eq!(allocation_error(1, 4), 0.5625);
    assert_eq!(allocation_error(4, 1), 0.5625);
    assert_eq!(optimal_allocation(4), (2, 2));
    assert_eq!(optimal_allocation(16), (4, 4));
    assert_eq!(optimal_allocation(2), (1, 2));
    assert_eq!(optimal_allocation(1), (1, 1));
    for k in 1..=8 {
        assert_eq!(optimal_allocation(k * k), (k, k));
    }
}

#[test]
fn balanced_allocation_is_optimal_for_squares() {
    for k in 1..=8u32 {
        for a in 1..=k * k {
            if (k * k) % a == 0 {
                assert!(allocation_error(k, k) <= allocation_error(a, k * k / a));
            }
        }
    }
}

#[test]
fn stage_starts_split_budget() {
    let cfg = TrainConfig { iters: 100, ..TrainConfig::default() };
    assert_eq!(cfg.stage_starts(2), vec![0, 50]);
    assert_eq!(cfg.all_scales(10).stage_starts(2), vec![0, 0]);
    let cfg = TrainConfig { stage_schedule: vec![0, 30], ..cfg };
    assert_eq!(cfg.stage_starts(3), vec![0, 30, 30]);
    assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
}

fn tiny_data() -> Dataset {
    Dataset::generate(3, 8, 4, &SceneConfig::new(32, 32, 3)).unwrap()
}

fn tiny_net(bits: BitWidths) -> NetConfig {
    NetConfig { in_ch: 3, num_classes: 3, base_width: 4, variant: ReconVariant::SingleConv, bits }
}

#[test]
fn routes_need_their_assets() {
    let cfg = tiny_net(BitWidths::uniform(2));
    let empty = RouteAssets::default();
    assert!(matches!(init_route(Route::P1, &empty, &cfg, 0), Err(Error::MissingAsset(_))));
    assert!(matches!(init_route(Route::P2, &empty, &cfg, 0), Err(Error::MissingAsset(_))));
    let extractor = build_toy_bfcn(&tiny_net(BitWidths::FULL), 9).unwrap();
    let assets = RouteAssets { fp_extractor: Some(extractor.clone()), ..Default::default() };
    let net = init_route(Route::P1, &assets, &cfg, 0).unwrap();
    assert!(net.layers.iter().all(|l| l.quant.is_full_precision()));
    assert_eq!(net.params["stage2.conv1.w"], extractor.params["stage2.conv1.w"]);
    assert_ne!(net.params["head4.w"], extractor.params["head4.w"]);
    let sched = Route::P1With8Bit.decay_schedule(2, Some(1), 1).unwrap();
    assert_eq!(decay_sequence(&sched).unwrap()[0], 8);
    assert_eq!(decay_sequence(&Route::P1With8Bit.decay_schedule(2, None, 1).unwrap()).unwrap(), vec![8, 2]);
    assert!(Route::P2.decay_schedule(2, Some(1), 1).is_none());
}

#[test]
fn decay_logs_schedule_and_keeps_first_layer() {
    let data = tiny_data();
    let mut net = build_toy_bfcn(&tiny_net(BitWidths::FULL), 1).unwrap();
    let cfg = TrainConfig { batch: 2, lr: 0.02, ..TrainConfig::default() };
    let sched = DecaySchedule::new(8, 3, 2, 3);
    let report = run_bit_width_decay(&mut net, &sched, &data, &cfg).unwrap();
    let bits: Vec<u32> = report.steps.iter().map(|s| s.bits.k_w).collect();
    assert_eq!(bits, decay_sequence(&sched).unwrap());
    assert_eq!(report.log.entries.len(), 9);
    assert_eq!(net.layer("stem").unwrap().quant.k_w, 8);
    assert_eq!(net.body_bits(), BitWidths::uniform(2));
    let tsv = report.log.to_tsv();
    assert!(tsv.starts_with("iter\tbits\tscales\tloss\tlr\n"));
    assert!(tsv.lines().nth(1).unwrap().starts_with("0\t8-8\t8,4\t"));
}

#[test]
fn no_decay_schedule_equals_plain_fine_tuning() {
    let data = tiny_data();
    let start = build_toy_bfcn(&tiny_net(BitWidths::uniform(4)), 1).unwrap();
    let cfg = TrainConfig { batch: 2, lr: 0.02, ..TrainConfig::default() };
    let mut decayed = start.clone();
    run_bit_width_decay(&mut decayed, &DecaySchedule::new(4, 1, 4, 4), &data, &cfg).unwrap();
    let mut plain = start;
    train(&mut plain, &data, &cfg.all_scales(4), &mut BTreeMap::new(), &mut TrainLog::default()).unwrap();
    assert_eq!(decayed.params, plain.params);
}

#[test]
fn divergence_guard_fires() {
    let data = tiny_data();
    let mut net = build_toy_bfcn(&tiny_net(BitWidths::FULL), 1).unwrap();
    net.params.get_mut("stem.w").unwrap().data[0] = f64::NAN;
    let cfg = TrainConfig { batch: 2, iters: 40, ..TrainConfig::default() };
    let r = train(&mut net, &data, &cfg, &mut BTreeMap::new(), &mut TrainLog::default());
    assert!(matches!(r, Err(Error::DivergenceDetected { .. })), "{r:?}");
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let data = tiny_data();
    let run = || {
        let mut net = build_toy_bfcn(&tiny_net(BitWidths::uniform(2)), 1).unwrap();
        let mut log = TrainLog::default();
        let cfg = TrainConfig { batch: 4, ..TrainConfig::default() }.all_scales(60);
        train(&mut net, &data, &cfg, &mut BTreeMap::new(), &mut log).unwrap();
        (net, log)
    };
    let (a, log) = run();
    let (b, _) = run();
    assert_eq!(a.params, b.params);
    let first: f64 = log.entries[..5].iter().map(|e| e.loss).sum();
    let last: f64 = log.entries[log.entries.len() - 5..].iter().map(|e| e.loss).sum();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn train_rejects_class_mismatch() {
    let data = tiny_data();
    let mut net = build_toy_bfcn(&NetConfig { num_classes: 4, ..tiny_net(BitWidths::FULL) }, 1).unwrap();
    let r = train(&mut net, &data, &TrainConfig::default(), &mut BTreeMap::new(), &mut TrainLog::default());
    assert!(matches!(r, Err(Error::BadConfig(_))));
}
