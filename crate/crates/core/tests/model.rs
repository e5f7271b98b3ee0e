use csdn::autodiff::{mul, sum};
use csdn::model::blocks::{Block, Forward, GeLayer};
use csdn::model::{count_parameters, load_weights, load_weights_into, save_weights, Csdn, ForwardOptions, NetworkConfig};
use csdn::nn::resize::resize_forward;
use csdn::nn::{conv2d, pixel_shuffle, ConvSpec, ResizeMode};
use csdn::{Error, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

fn ceil_halvings(mut v: usize, k: usize) -> usize {
    for _ in 0..k {
        v = v.div_ceil(2);
    }
    v
}

#[test]
fn reference_budget() {
    let n = count_parameters(&NetworkConfig::reference()).unwrap();
    assert_eq!(n, 1_725_720);
    assert!((1_540_000..=1_880_000).contains(&n));
    let net = Csdn::<f32>::new(NetworkConfig::reference(), 0).unwrap();
    assert_eq!(net.num_parameters(), n);
    assert!(count_parameters(&NetworkConfig::tiny()).unwrap() <= 100_000);
}

#[test]
fn sub_block_counts_match_hand_computation() {
    let arch = csdn::model::Architecture::new(&NetworkConfig::reference()).unwrap();
    // Stem, 12 -> 16 channels:
    //   conv3x3 12->16: 1728 + BN 32 + PReLU 16            = 1776
    //   branch conv1x1 16->8: 128 + 16 + 8                   =  152
    //   branch conv3x3 8->8 stride 2: 576 + 16 + 8           =  600
    //   fuse conv3x3 24->16: 3456 + 32 + 16                  = 3504
    assert_eq!(arch.stem.num_params(), 1776 + 152 + 600 + 3504);
    // Stride-1 GE layer, c = 16, e = 6:
    //   expand 16->96: 13824 + 192 + 96 = 14112; dw 96: 864 + 192 = 1056;
    //   proj 96->16: 1536 + 32 = 1568; output PReLU 16.
    assert_eq!(arch.stages[0][1].num_params(), 14112 + 1056 + 1568 + 16);
    // Stride-2 GE layer, 16 -> 32, e = 6:
    //   expand 14112; dw1 1056; dw2 1056; proj 96->32: 3072 + 64 = 3136;
    //   shortcut dw 16: 144 + 32 = 176; shortcut proj 16->32: 512 + 64 = 576;
    //   output PReLU 32.
    assert_eq!(arch.stages[1][0].num_params(), 14112 + 1056 + 1056 + 3136 + 176 + 576 + 32);
    assert_eq!(arch.stages.iter().map(Vec::len).collect::<Vec<_>>(), [2, 3, 4]);
    assert_eq!(arch.shallow.layers.len(), 9);
}

#[test]
fn single_layer_counts() {
    assert_eq!(ConvSpec::k3(4, 8, 1).with_bias().num_params(), 296);
    assert_eq!(csdn::model::Unit::bn("x", 7).num_params(), 14);
}

#[test]
fn reduction_chain_at_every_tap() {
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 3).unwrap();
    let cfg = net.config().clone();
    for size in [64usize, 128, 896] {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::full([1, 3, size, size], 0.5f32));
        let (out, _) = net.forward(&mut tape, x, ForwardOptions::eval()).unwrap();
        let t = &out.trace;
        let q = size / 4;
        assert_eq!(tape.shape(t.downsampled), Shape::new(1, 12, q, q));
        let d = ceil_halvings(q, 3);
        assert_eq!(tape.shape(t.detail), Shape::new(1, cfg.shallow_channels[2], d, d), "size {}", size);
        let tap_channels = [cfg.stem_channels, cfg.ge_stage_channels[0], cfg.ge_stage_channels[1], cfg.ge_stage_channels[2]];
        for (i, (&tap, &c)) in t.taps.iter().zip(&tap_channels).enumerate() {
            let s = ceil_halvings(q, 2 + i);
            assert_eq!(tape.shape(tap), Shape::new(1, c, s, s), "size {} tap {}", size, i);
        }
        let s5 = ceil_halvings(q, 5);
        assert_eq!(tape.shape(t.semantic), Shape::new(1, cfg.ge_stage_channels[2], s5, s5));
        assert_eq!(tape.shape(t.fused), Shape::new(1, cfg.fusion_channels, d, d));
        assert_eq!(tape.shape(out.main), Shape::new(1, 3, size, size));
        assert!(out.aux.is_empty());
    }
    // At 896 every halving is exact: detail ÷32 and semantic ÷128 of the input.
    assert_eq!(ceil_halvings(224, 3), 896 / 32);
    assert_eq!(ceil_halvings(224, 5), 896 / 128);
}

#[test]
fn train_mode_outputs() {
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 3).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random([2, 3, 64, 64], 1).cast());
    let (out, updates) = net.forward(&mut tape, x, ForwardOptions::train()).unwrap();
    assert_eq!(out.aux.len(), 4);
    for &a in &out.aux {
        assert_eq!(tape.shape(a), Shape::new(2, 3, 64, 64));
    }
    assert!(!updates.is_empty());
    // Raw logits: channel sums are not pinned to one.
    let logits = tape.value(out.main);
    let sum0: f32 = (0..3).map(|c| logits.at(0, c, 5, 5)).sum();
    assert!((sum0 - 1.0).abs() > 1e-6);
}

#[test]
fn bad_inputs_rejected() {
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 3).unwrap();
    assert!(matches!(net.predict(&Tensor::zeros([1, 3, 96, 96])), Err(Error::Shape(_))));
    assert!(matches!(net.predict(&Tensor::zeros([1, 2, 64, 64])), Err(Error::Shape(_))));
}

#[test]
fn eval_forward_is_pure_and_finite() {
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 9).unwrap();
    let zero = Tensor::zeros([1, 3, 64, 64]);
    let a = net.predict(&zero).unwrap();
    let b = net.predict(&zero).unwrap();
    assert!(a.all_finite());
    assert_eq!(a, b);
    let x = random([2, 3, 64, 64], 4).cast::<f32>();
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn parallel_and_sequential_agree() {
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 9).unwrap();
    let x = random([3, 3, 64, 64], 5).cast::<f32>();
    let seq = csdn::parallel::with_mode(false, || net.predict(&x).unwrap());
    let par = csdn::parallel::with_mode(true, || net.predict(&x).unwrap());
    assert_eq!(seq, par);
}

#[test]
fn same_seed_same_weights_and_names() {
    let a = Csdn::<f32>::new(NetworkConfig::tiny(), 5).unwrap();
    let b = Csdn::<f32>::new(NetworkConfig::tiny(), 5).unwrap();
    let c = Csdn::<f32>::new(NetworkConfig::tiny(), 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert!(a.params().names().eq(c.params().names()));
    assert!(a.params().contains("deep.stage3.ge0.dw1.conv.weight"));
}

#[test]
fn downsample_inverts_to_bicubic_image() {
    let x = random([1, 3, 64, 64], 8);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let d = csdn::model::blocks::downsample(&mut tape, xv, 2).unwrap();
    assert_eq!(tape.shape(d), Shape::new(1, 12, 16, 16));
    let back = pixel_shuffle(&mut tape, d, 2).unwrap();
    let oracle = resize_forward(&x, 32, 32, ResizeMode::Bicubic).unwrap();
    assert_eq!(tape.value(back), &oracle);

    let c = Tensor::full([1, 3, 896, 896], 0.25f64);
    let mut tape = Tape::<f64>::new();
    let cv = tape.constant(c);
    let d = csdn::model::blocks::downsample(&mut tape, cv, 2).unwrap();
    assert_eq!(tape.shape(d), Shape::new(1, 12, 224, 224));
    assert!(tape.value(d).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn ge_layer_with_zero_projection_is_prelu() {
    let mut net = Csdn::<f64>::new(NetworkConfig::tiny(), 2).unwrap();
    let name = "deep.stage4.ge1.proj.conv.weight";
    let shape = net.params().get(name).unwrap().shape();
    net.params_mut().set(name, Tensor::zeros(shape)).unwrap();
    let layer = &net.architecture().stages[1][1];
    let mut x = random([1, 8, 6, 6], 3);
    x.data_mut().iter_mut().for_each(|v| *v -= 0.5);
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, net.params(), ForwardOptions::eval());
    let xv = f.tape.constant(x.clone());
    let y = layer.forward(&mut f, xv).unwrap();
    assert_eq!(f.tape.shape(y), x.shape());
    for (&yi, &xi) in f.tape.value(y).data().iter().zip(x.data()) {
        let expect = if xi >= 0.0 { xi } else { 0.25 * xi };
        assert!((yi - expect).abs() < 1e-12);
    }
}

#[test]
fn stride2_shortcut_matters() {
    let net = Csdn::<f64>::new(NetworkConfig::tiny(), 2).unwrap();
    let layer = &net.architecture().stages[0][0];
    assert!(matches!(layer, GeLayer::Stride2 { .. }));
    let x = random([1, 4, 8, 8], 3);
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, net.params(), ForwardOptions::eval());
    let xv = f.tape.constant(x);
    let full = layer.forward(&mut f, xv).unwrap();
    let main = layer.main_path(&mut f, xv).unwrap();
    let act = f.param("deep.stage3.ge0.out.act.alpha").unwrap();
    let main_only = csdn::nn::prelu(f.tape, main, act).unwrap();
    assert_eq!(f.tape.shape(full), Shape::new(1, 4, 4, 4));
    assert_ne!(f.tape.value(full), f.tape.value(main_only));
}

#[test]
fn depthwise_stage_is_channel_independent() {
    let net = Csdn::<f64>::new(NetworkConfig::tiny(), 2).unwrap();
    let w = net.params().get("deep.stage4.ge1.dw.conv.weight").unwrap().clone();
    let c = w.shape().n;
    let spec = ConvSpec::depthwise(c, 3, 1, 1);
    for k in 0..c {
        let mut x = random([1, c, 5, 5], k as u64);
        for i in 0..25 {
            x.data_mut()[k * 25 + i] = 0.0;
        }
        let mut tape = Tape::inference();
        let (xv, wv) = (tape.constant(x), tape.constant(w.clone()));
        let y = conv2d(&mut tape, xv, wv, None, &spec).unwrap();
        let yd = tape.value(y).data();
        for ch in 0..c {
            let zero = yd[ch * 25..(ch + 1) * 25].iter().all(|&v| v == 0.0);
            assert_eq!(zero, ch == k, "channel {} with input {} zeroed", ch, k);
        }
    }
}

#[test]
fn context_block_sees_every_pixel() {
    let net = Csdn::<f64>::new(NetworkConfig::tiny(), 2).unwrap();
    let ctx = &net.architecture().context;
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::inference();
        let mut f = Forward::new(&mut tape, net.params(), ForwardOptions::eval());
        let xv = f.tape.constant(x.clone());
        let y = ctx.forward(&mut f, xv).unwrap();
        f.tape.value(y).clone()
    };
    let x = random([1, 8, 7, 7], 1);
    let base = run(&x);
    assert_eq!(base.shape(), x.shape());
    let mut probe = x.clone();
    probe.set(0, 3, 0, 0, probe.at(0, 3, 0, 0) + 1.0);
    let moved = run(&probe);
    for y in 0..7 {
        for xx in 0..7 {
            let changed = (0..8).any(|c| moved.at(0, c, y, xx) != base.at(0, c, y, xx));
            assert!(changed, "pixel ({}, {}) unaffected", y, xx);
        }
    }
    let constant = run(&Tensor::full([1, 8, 7, 7], 0.3));
    for c in 0..8 {
        let v = constant.at(0, c, 3, 3);
        for y in 1..6 {
            for xx in 1..6 {
                assert!((constant.at(0, c, y, xx) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fusion_contract() {
    let net = Csdn::<f64>::new(NetworkConfig::tiny(), 2).unwrap();
    let fusion = &net.architecture().fusion;
    let run = |d: &Tensor<f64>, s: &Tensor<f64>| {
        let mut tape = Tape::inference();
        let mut f = Forward::new(&mut tape, net.params(), ForwardOptions::eval());
        let (dv, sv) = (f.tape.constant(d.clone()), f.tape.constant(s.clone()));
        fusion.forward(&mut f, dv, sv).map(|y| f.tape.value(y).clone())
    };
    let d = random([1, 8, 28, 28], 1);
    let s = random([1, 8, 7, 7], 2);
    assert_eq!(run(&d, &s).unwrap().shape(), Shape::new(1, 8, 28, 28));
    let zero_s = Tensor::zeros([1, 8, 7, 7]);
    let a = run(&d, &zero_s).unwrap();
    let b = run(&random([1, 8, 28, 28], 3), &zero_s).unwrap();
    assert_ne!(a, b);
    assert!(run(&d, &random([1, 8, 5, 5], 4)).is_err());
    assert!(run(&d, &random([1, 4, 7, 7], 4)).is_err());
}

#[test]
fn gradients_reach_both_streams() {
    let net = Csdn::<f64>::new(NetworkConfig::tiny(), 2).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random([2, 3, 64, 64], 1));
    let (out, _) = net.forward(&mut tape, x, ForwardOptions::train()).unwrap();
    let w = tape.constant(random([2, 3, 64, 64], 2));
    let mut l = {
        let m = mul(&mut tape, out.main, w).unwrap();
        sum(&mut tape, m).unwrap()
    };
    for &a in &out.aux {
        let m = mul(&mut tape, a, w).unwrap();
        let s = sum(&mut tape, m).unwrap();
        l = csdn::autodiff::add(&mut tape, l, s).unwrap();
    }
    let g = tape.backward(l).unwrap();
    for name in ["shallow.block0.conv0.conv.weight", "deep.stem.conv.conv.weight", "deep.context.embed.conv.weight"] {
        assert!(g.by_name(name).unwrap().max_abs() > 0.0, "{}", name);
    }
    assert_eq!(g.named().count(), net.params().learnable().count());
}

#[test]
fn running_stats_update_in_train_mode() {
    let mut net = Csdn::<f32>::new(NetworkConfig::tiny(), 2).unwrap();
    let before = net.params().get("deep.stem.conv.bn.running_mean").unwrap().clone();
    let mut tape = Tape::new();
    let x = tape.constant(random([2, 3, 64, 64], 1).cast());
    let (_, updates) = net.forward(&mut tape, x, ForwardOptions::train()).unwrap();
    net.apply_bn_updates(updates).unwrap();
    assert_ne!(net.params().get("deep.stem.conv.bn.running_mean").unwrap(), &before);
}

#[test]
fn weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csdn");
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 11).unwrap();
    save_weights(&net, &path).unwrap();
    let back: Csdn<f32> = load_weights(&path).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.params(), net.params());
    assert!(back.params().names().eq(net.params().names()));

    let mut other = Csdn::<f32>::new(NetworkConfig { fusion_channels: 12, ..NetworkConfig::tiny() }, 0).unwrap();
    match load_weights_into(&mut other, &path) {
        Err(Error::ParameterShape { name, .. }) => assert!(name.starts_with("fusion") || name.starts_with("head")),
        other => panic!("expected a shape error, got {:?}", other.err()),
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_weights::<f32>(&path), Err(Error::Format(_))));
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(matches!(load_weights::<f32>(&path), Err(Error::Format(_))));
}
