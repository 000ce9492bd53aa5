use super::*;
use crate::dataset::IGNORE_LABEL;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(variant: ReconVariant, bits: BitWidths) -> NetConfig {
    NetConfig { in_ch: 3, num_classes: 4, base_width: 8, variant, bits }
}

fn rand_image(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * h * w).map(|_| rng.gen_range(0..=255) as f64 / 255.0).collect();
    Tensor::from_vec([n, 3, h, w], data).unwrap()
}

/// Perturbs BN running statistics so eval-mode normalization is non-trivial.
fn randomize_buffers(net: &mut SegNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in net.buffers.iter_mut() {
        for v in &mut t.data {
            *v = if name.ends_with(".var") { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.3..0.3) };
        }
    }
}

// Independent full-precision oracle for the toy topology.
mod oracle {
    use super::*;

    pub fn conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = x.shape;
        let [o, _, kh, kw] = w.shape;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut y = Tensor::zeros([n, o, oh, ow]);
        for b in 0..n {
            for f in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0.0;
                        for ch in 0..c {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    let (yy, xx) = (
                                        (i * stride + di) as isize - pad as isize,
                                        (j * stride + dj) as isize - pad as isize,
                                    );
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                        s += x.at(b, ch, yy as usize, xx as usize) * w.at(f, ch, di, dj);
                                    }
                                }
                            }
                        }
                        let idx = y.index(b, f, i, j);
                        y.data[idx] = s;
                    }
                }
            }
        }
        y
    }

    fn bn(net: &SegNet, x: &Tensor, p: &str) -> Tensor {
        let [n, c, h, w] = x.shape;
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let m = net.buffers[&format!("{p}.mean")].data[ch];
                let v = net.buffers[&format!("{p}.var")].data[ch];
                let g = net.params[&format!("{p}.gamma")].data[ch];
                let be = net.params[&format!("{p}.beta")].data[ch];
                for i in 0..h * w {
                    let k = (b * c + ch) * h * w + i;
                    y.data[k] = g * (x.data[k] - m) / (v + 1e-5).sqrt() + be;
                }
            }
        }
        y
    }

    fn cba(net: &SegNet, x: &Tensor, p: &str, stride: usize) -> Tensor {
        bn(net, &conv(x, &net.params[&format!("{p}.w")], stride, 1), p).map(|v| v.clamp(0.0, 1.0))
    }

    fn residual(net: &SegNet, x: &Tensor, p: &str, stride: usize) -> Tensor {
        let h = cba(net, x, &format!("{p}.conv1"), stride);
        let mut y = bn(net, &conv(&h, &net.params[&format!("{p}.conv2.w")], 1, 1), &format!("{p}.conv2"));
        let proj = format!("{p}.proj");
        let s = if net.params.contains_key(&format!("{proj}.w")) {
            bn(net, &conv(x, &net.params[&format!("{proj}.w")], stride, 0), &proj)
        } else {
            x.clone()
        };
        y.add_assign(&s).unwrap();
        y.map(|v| v.clamp(0.0, 1.0))
    }

    fn head(net: &SegNet, x: &Tensor, p: &str) -> Tensor {
        let mut y = conv(x, &net.params[&format!("{p}.w")], 1, 0);
        let [n, c, h, w] = y.shape;
        for k in 0..y.len() {
            y.data[k] += net.params[&format!("{p}.b")].data[(k / (h * w)) % c];
        }
        let _ = n;
        y
    }

    pub fn forward_single(net: &SegNet, x: &Tensor) -> (Tensor, Tensor) {
        let x = x.map(|v| v.clamp(0.0, 1.0));
        let s0 = cba(net, &x, "stem", 1);
        let s1 = residual(net, &s0, "stage1", 2);
        let s2 = residual(net, &s1, "stage2", 2);
        let s3 = residual(net, &s2, "stage3", 2);
        let z8 = head(net, &cba(net, &s3, "recon8", 1), "head8");
        let z4 = head(net, &cba(net, &s2, "recon4", 1), "head4");
        let [n, c, h, w] = z8.shape;
        let mut up = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        let k = up.index(b, ch, i, j);
                        up.data[k] = z8.at(b, ch, i / 2, j / 2);
                    }
                }
            }
        }
        let mut z4r = z4;
        z4r.add_assign(&up).unwrap();
        (z8, z4r)
    }
}

#[test]
fn conv_counts_per_variant() {
    let single = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 1).unwrap();
    let residual = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::uniform(2)), 1).unwrap();
    let wide = build_toy_bfcn(&cfg(ReconVariant::WideConv, BitWidths::uniform(2)), 1).unwrap();
    let branches = single.scales.len();
    assert_eq!(residual.conv_count(), single.conv_count() + branches);
    assert_eq!(wide.conv_count(), single.conv_count());
    let recon = residual.layer("recon8").unwrap();
    assert_eq!(recon.kind, LayerKind::ResidualBlock);
    assert_eq!(recon.convs().len(), 2);
    assert_eq!(single.layer("recon8").unwrap().convs().len(), 1);
}

#[test]
fn first_layer_keeps_eight_bit_weights() {
    let net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 1).unwrap();
    assert_eq!(net.layer("stem").unwrap().quant.k_w, 8);
    assert_eq!(net.layer("stem").unwrap().quant.k_a, 2);
    assert_eq!(net.layer("image").unwrap().quant.k_a, 8);
    assert_eq!(net.layer("head4").unwrap().quant.k_w, 2);
    let fp = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::FULL), 1).unwrap();
    assert!(fp.layers.iter().all(|l| l.quant.is_full_precision()));
}

#[test]
fn build_rejects_bad_config() {
    let mut c = cfg(ReconVariant::SingleConv, BitWidths::uniform(2));
    c.base_width = 3;
    assert!(matches!(build_toy_bfcn(&c, 0), Err(Error::BadConfig(_))));
    c.base_width = 8;
    c.num_classes = 1;
    assert!(matches!(build_toy_bfcn(&c, 0), Err(Error::BadConfig(_))));
}

#[test]
fn dag_validation() {
    let mut net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 1).unwrap();
    net.layers[2].inputs = vec!["nowhere".into()];
    assert!(matches!(net.validate(), Err(Error::BadConfig(_))));
    let mut net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 1).unwrap();
    net.layers[1].inputs = vec!["stage1".into()];
    assert!(net.validate().is_err(), "forward reference forms a cycle");
}

#[test]
fn full_precision_forward_matches_oracle() {
    for variant in [ReconVariant::SingleConv, ReconVariant::WideConv] {
        let mut net = build_toy_bfcn(&cfg(variant, BitWidths::FULL), 7).unwrap();
        randomize_buffers(&mut net, 8);
        let x = rand_image(9, 2, 16, 16);
        let fwd = forward(&net, &x, &ForwardOptions::eval()).unwrap();
        let (z8, z4) = oracle::forward_single(&net, &x);
        assert!(fwd.logits[&8].max_abs_diff(&z8) < 1e-5);
        assert!(fwd.logits[&4].max_abs_diff(&z4) < 1e-5);
        let reference = forward(&net, &x, &ForwardOptions::eval().with_backend(ConvBackend::Reference)).unwrap();
        assert!(reference.logits[&4].max_abs_diff(&z4) < 1e-5);
    }
}

#[test]
fn bit_backend_matches_reference_backend() {
    for bits in [BitWidths::new(2, 2), BitWidths::new(1, 2), BitWidths::new(4, 3)] {
        let mut net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, bits), 3).unwrap();
        randomize_buffers(&mut net, 4);
        let x = rand_image(5, 2, 16, 16);
        let bit = forward(&net, &x, &ForwardOptions::eval().with_backend(ConvBackend::Bit)).unwrap();
        let reference = forward(&net, &x, &ForwardOptions::eval().with_backend(ConvBackend::Reference)).unwrap();
        for s in [4, 8] {
            let d = bit.logits[&s].max_abs_diff(&reference.logits[&s]);
            assert!(d <= 1e-4, "{bits} stride {s}: {d}");
        }
        assert!(bit.kernel_passes > 0);
        assert_eq!(reference.kernel_passes, 0);
    }
}

#[test]
fn zero_image_and_zero_bias_give_zero_logits() {
    let mut net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::uniform(2)), 2).unwrap();
    for (name, t) in net.params.iter_mut() {
        if name.ends_with(".beta") || name.ends_with(".b") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = Tensor::zeros([1, 3, 16, 16]);
    let fwd = forward(&net, &x, &ForwardOptions::eval().with_backend(ConvBackend::Bit)).unwrap();
    assert!(fwd.logits.values().all(|z| z.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn forward_rejects_bad_input() {
    let net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 2).unwrap();
    let x = Tensor::zeros([1, 3, 12, 16]);
    assert!(matches!(forward(&net, &x, &ForwardOptions::eval()), Err(Error::NonDivisibleInput { h: 12, .. })));
    let x = Tensor::zeros([1, 2, 16, 16]);
    assert!(matches!(forward(&net, &x, &ForwardOptions::eval()), Err(Error::ShapeMismatch(_))));
}

#[test]
fn coarse_logits_independent_of_finest_branch() {
    let net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::uniform(2)), 2).unwrap();
    let x = rand_image(1, 1, 16, 16);
    let full = forward(&net, &x, &ForwardOptions::eval()).unwrap();
    let coarse = forward(&net, &x, &ForwardOptions::eval().with_scales(&[8])).unwrap();
    assert_eq!(coarse.logits.len(), 1);
    assert_eq!(coarse.logits[&8], full.logits[&8]);
    assert!(coarse.ops < full.ops);
}

#[test]
fn forward_is_deterministic() {
    let net = build_toy_bfcn(&cfg(ReconVariant::WideConv, BitWidths::uniform(2)), 2).unwrap();
    let x = rand_image(1, 2, 16, 16);
    for backend in [ConvBackend::Float, ConvBackend::Bit, ConvBackend::Reference] {
        let a = forward(&net, &x, &ForwardOptions::eval().with_backend(backend)).unwrap();
        let b = forward(&net, &x, &ForwardOptions::eval().with_backend(backend)).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}

#[test]
fn ops_order_single_residual_wide() {
    for width in [8, 16] {
        let ops = |v| {
            let c = NetConfig { base_width: width, ..cfg(v, BitWidths::uniform(2)) };
            build_toy_bfcn(&c, 0).unwrap().ops_per_forward(64, 64)
        };
        let (s, r, w) = (ops(ReconVariant::SingleConv), ops(ReconVariant::ResidualBlock), ops(ReconVariant::WideConv));
        assert!(s < r && r < w, "{s} {r} {w}");
    }
    let net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::uniform(2)), 0).unwrap();
    let fwd = forward(&net, &rand_image(0, 2, 16, 16), &ForwardOptions::eval()).unwrap();
    assert_eq!(fwd.ops, 2 * net.ops_per_forward(16, 16));
}

fn one_scale(z: Tensor) -> BTreeMap<usize, Tensor> {
    BTreeMap::from([(1, z)])
}

#[test]
fn loss_uniform_logits_is_ln_c() {
    let z = Tensor::zeros([2, 5, 4, 4]);
    let labels = vec![LabelMap::filled(4, 4, 3); 2];
    let loss = stagewise_loss(&one_scale(z.clone()), &labels, &[1], &[1.0; 5]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    let both = BTreeMap::from([(1, z), (2, Tensor::zeros([2, 5, 2, 2]))]);
    let loss = stagewise_loss(&both, &labels, &[1, 2], &[1.0; 5]).unwrap();
    assert!((loss - 2.0 * 5f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_vanishes_for_confident_correct_logits() {
    let mut labels = LabelMap::filled(2, 2, 0);
    labels.data = vec![0, 1, 1, 0];
    let mut z = Tensor::zeros([1, 2, 2, 2]);
    for (pos, &y) in labels.data.iter().enumerate() {
        z.data[y as usize * 4 + pos] = 1e3;
    }
    let loss = stagewise_loss(&one_scale(z), &[labels], &[1], &[1.0, 1.0]).unwrap();
    assert!(loss < 1e-12);
}

#[test]
fn loss_two_class_hand_case() {
    // Labels [0, 1; 1, IGNORE], weights [1, 2].
    let mut labels = LabelMap::filled(2, 2, 0);
    labels.data = vec![0, 1, 1, IGNORE_LABEL];
    let z = Tensor::from_vec([1, 2, 2, 2], vec![2.0, 0.0, 1.0, 9.0, 0.0, 1.0, 3.0, -9.0]).unwrap();
    // pixel 0: y=0, z=(2,0): -ln(e^2/(e^2+1)) = ln(1+e^-2)
    // pixel 1: y=1, z=(0,1): ln(1+e^-1), weight 2
    // pixel 2: y=1, z=(1,3): ln(1+e^-2), weight 2
    let expected =
        ((1.0 + (-2f64).exp()).ln() + 2.0 * (1.0 + (-1f64).exp()).ln() + 2.0 * (1.0 + (-2f64).exp()).ln()) / 3.0;
    let (loss, grads) = stagewise_loss_with_grad(&one_scale(z), &[labels], &[1], &[1.0, 2.0]).unwrap();
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    assert_eq!(grads[&1].data[3], 0.0);
    assert_eq!(grads[&1].data[7], 0.0);
}

#[test]
fn loss_rejects_bad_labels() {
    let labels = vec![LabelMap::filled(2, 2, 2)];
    let r = stagewise_loss(&one_scale(Tensor::zeros([1, 2, 2, 2])), &labels, &[1], &[1.0, 1.0]);
    assert!(matches!(r, Err(Error::BadLabels(_))));
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::uniform(2)), 2).unwrap();
    let x = rand_image(1, 2, 16, 16);
    let fwd = forward(&net, &x, &ForwardOptions::train()).unwrap();
    let d = fwd.logits.iter().map(|(s, z)| (*s, Tensor::zeros(z.shape))).collect();
    let grads = backward(&net, &fwd, &d).unwrap();
    assert_eq!(grads.len(), net.params.len());
    assert!(grads.values().all(|g| g.data.iter().all(|&v| v == 0.0)));
}

fn random_labels(seed: u64, n: usize, h: usize, w: usize, c: u8) -> Vec<LabelMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut m = LabelMap::filled(h, w, 0);
            m.data.iter_mut().for_each(|v| *v = rng.gen_range(0..c));
            m
        })
        .collect()
}

/// Central differences of the training loss on sampled parameter coordinates.
fn check_grads(net: &SegNet, x: &Tensor, labels: &[LabelMap], opts: &ForwardOptions, samples: usize, seed: u64) {
    let scales = [4, 8];
    let weights = [1.0, 1.5, 0.7, 2.0];
    let loss_of = |n: &SegNet| {
        let f = forward(n, x, &ForwardOptions { keep_cache: false, ..opts.clone() }).unwrap();
        stagewise_loss(&f.logits, labels, &scales, &weights).unwrap()
    };
    let (_, grads, _) = compute_gradients(net, x, labels, &scales, &weights, opts).unwrap();
    let names: Vec<&String> = net.params.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Small enough that no clamp kink falls inside the stencil.
    let eps = 1e-6;
    for _ in 0..samples {
        let name = names[rng.gen_range(0..names.len())];
        let i = rng.gen_range(0..net.params[name].len());
        let mut plus = net.clone();
        plus.params.get_mut(name).unwrap().data[i] += eps;
        let mut minus = net.clone();
        minus.params.get_mut(name).unwrap().data[i] -= eps;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        let g = grads[name].data[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
        assert!(rel <= 1e-3, "{name}[{i}]: analytic {g}, numeric {fd}");
    }
}

#[test]
fn full_precision_grads_match_finite_differences() {
    let net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::FULL), 11).unwrap();
    let x = rand_image(12, 2, 16, 16);
    let labels = random_labels(13, 2, 16, 16, 4);
    check_grads(&net, &x, &labels, &ForwardOptions::train(), 50, 14);
}

#[test]
fn quantized_grads_match_surrogate_finite_differences() {
    let net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 21).unwrap();
    let x = rand_image(22, 2, 16, 16);
    let labels = random_labels(23, 2, 16, 16, 4);
    let opts = ForwardOptions::train().with_quant_mode(QuantMode::Surrogate);
    check_grads(&net, &x, &labels, &opts, 50, 24);
}

#[test]
fn model_file_roundtrip() {
    let mut net = build_toy_bfcn(&cfg(ReconVariant::ResidualBlock, BitWidths::new(1, 2)), 5).unwrap();
    randomize_buffers(&mut net, 6);
    for t in net.params.values_mut().chain(net.buffers.values_mut()) {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let velocity: BTreeMap<String, Tensor> = net.params.iter().map(|(k, v)| (k.clone(), v.map(|x| x * 0.5))).collect();
    let mut buf = Vec::new();
    write_model(&mut buf, &net, Some(&velocity)).unwrap();
    assert_eq!(&buf[..4], b"BFCN");
    assert_eq!(buf[4], 1);
    assert_eq!(u16::from_le_bytes([buf[5], buf[6]]), 4);
    let back = read_model(&mut buf.as_slice()).unwrap();
    assert_eq!(back.net, net);
    assert_eq!(back.velocity, velocity);
    let mut plain = Vec::new();
    write_model(&mut plain, &net, None).unwrap();
    assert!(read_model(&mut plain.as_slice()).unwrap().velocity.is_empty());
    plain[0] = b'X';
    assert!(matches!(read_model(&mut plain.as_slice()), Err(Error::Format(_))));
}

#[test]
fn set_bit_widths_keeps_first_layer_rule() {
    let mut net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::FULL), 1).unwrap();
    net.set_bit_widths(BitWidths::uniform(3)).unwrap();
    assert_eq!(net.layer("stem").unwrap().quant.k_w, 8);
    assert_eq!(net.layer("image").unwrap().quant.k_a, 8);
    assert_eq!(net.body_bits(), BitWidths::uniform(3));
    net.set_bit_widths(BitWidths::FULL).unwrap();
    assert!(net.layers.iter().all(|l| l.quant.is_full_precision()));
}

#[test]
fn predict_returns_finest_grid() {
    let net = build_toy_bfcn(&cfg(ReconVariant::SingleConv, BitWidths::uniform(2)), 1).unwrap();
    let maps = predict(&net, &rand_image(0, 3, 32, 16), ConvBackend::Bit).unwrap();
    assert_eq!(maps.len(), 3);
    assert_eq!((maps[0].height, maps[0].width), (8, 4));
    assert!(maps.iter().flat_map(|m| &m.data).all(|&v| v < 4));
}
