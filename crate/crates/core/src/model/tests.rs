use super::*;
use crate::autograd::gradcheck::{finite_diff_check, FdOptions};

fn small(arch: Arch, base: usize, size: usize) -> ModelConfig {
    ModelConfig {
        base_channels: base,
        input_size: (size, size),
        ..ModelConfig::new(arch)
    }
}

fn random_image(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let len = dims.iter().product();
    Tensor::from_vec(dims, (0..len).map(|_| rng.next_f64() as f32).collect()).unwrap()
}

#[test]
fn channel_sequence_doubles_per_level() {
    let m = build_unet(&ModelConfig::default(), 1).unwrap();
    let out_ch = |name: &str| m.params[name].dims()[0];
    assert_eq!(out_ch("down1.conv2.weight"), 16);
    assert_eq!(out_ch("down2.conv2.weight"), 32);
    assert_eq!(out_ch("down3.conv2.weight"), 64);
    assert_eq!(out_ch("mid.conv2.weight"), 128);
    assert_eq!(m.params["up3.upconv.weight"].dims(), [128, 64, 2, 2]);
    assert_eq!(out_ch("up3.conv2.weight"), 64);
    assert_eq!(out_ch("up2.conv2.weight"), 32);
    assert_eq!(out_ch("up1.conv2.weight"), 16);
    assert_eq!(m.params["head.weight"].dims(), [1, 16, 1, 1]);
}

#[test]
fn forward_shapes_at_full_size() {
    let m = build_unet(&ModelConfig::default(), 2).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_image([1, 1, 128, 128], 3));
    let (out, _) = m.forward(&mut g, x).unwrap();
    assert_eq!(g.value(out.logits).dims(), [1, 1, 128, 128]);
    let aux: Vec<_> = out.aux.iter().map(|&a| g.value(a).dims()).collect();
    assert_eq!(aux, vec![[1, 1, 64, 64], [1, 1, 32, 32], [1, 1, 16, 16]]);
}

#[test]
fn dilated_forward_preserves_extent() {
    let cfg = small(Arch::Dilated, 4, 128);
    let m = build_dilated_unet(&cfg, 2).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_image([1, 1, 128, 128], 4));
    let (out, _) = m.forward(&mut g, x).unwrap();
    assert_eq!(g.value(out.logits).dims(), [1, 1, 128, 128]);
}

#[test]
fn any_divisible_extent_is_accepted() {
    for arch in [Arch::Plain, Arch::Dilated] {
        let m = build_model(&small(arch, 4, 128), 5).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_image([1, 1, 64, 64], 6));
        let (out, _) = m.forward(&mut g, x).unwrap();
        assert_eq!(g.value(out.logits).dims(), [1, 1, 64, 64]);
        let p: Vec<f32> = g.value(out.logits).data().to_vec();
        let mut g2 = Graph::new();
        let l = g2.input(Tensor::from_vec([1, 1, 64, 64], p).unwrap());
        let s = g2.sigmoid(l);
        assert!(g2.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    let m = build_unet(&small(Arch::Plain, 2, 16), 1).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_image([1, 1, 20, 20], 1));
    assert!(matches!(m.forward(&mut g, x), Err(Error::Shape { .. })));
}

#[test]
fn zero_head_gives_uniform_map() {
    let mut m = build_unet(&small(Arch::Plain, 4, 32), 9).unwrap();
    m.params["head.weight"].data_mut().fill(0.0);
    m.params["head.bias"].data_mut().fill(-0.7);
    let mut g = Graph::new();
    let x = g.input(random_image([1, 1, 32, 32], 10));
    let (out, _) = m.forward(&mut g, x).unwrap();
    assert!(g.value(out.logits).data().iter().all(|&v| v == -0.7));
}

#[test]
fn batch_items_are_independent() {
    let m = build_dilated_unet(&small(Arch::Dilated, 4, 32), 11).unwrap();
    let a = random_image([1, 1, 32, 32], 12);
    let b = random_image([1, 1, 32, 32], 13);
    let run = |x: Tensor| {
        let mut g = Graph::new();
        let x = g.input(x);
        let (out, _) = m.forward(&mut g, x).unwrap();
        g.value(out.logits).clone()
    };
    let joint = run(Tensor::stack(&[&a, &b]).unwrap());
    let mut separate = run(a).into_vec();
    separate.extend(run(b).into_vec());
    assert_eq!(joint.data(), separate.as_slice());
}

#[test]
fn build_is_deterministic() {
    let cfg = small(Arch::Dilated, 4, 32);
    assert_eq!(build_model(&cfg, 7).unwrap(), build_model(&cfg, 7).unwrap());
    assert_ne!(build_model(&cfg, 7).unwrap(), build_model(&cfg, 8).unwrap());
}

#[test]
fn builders_check_arch() {
    assert!(build_unet(&ModelConfig::new(Arch::Dilated), 0).is_err());
    assert!(build_dilated_unet(&ModelConfig::new(Arch::Plain), 0).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig {
            input_size: (100, 128),
            ..ModelConfig::default()
        },
        ModelConfig {
            dilations: vec![4, 2],
            ..ModelConfig::new(Arch::Dilated)
        },
        ModelConfig {
            dilations: vec![1, 2],
            ..ModelConfig::new(Arch::Dilated)
        },
        ModelConfig {
            base_channels: 0,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))), "{cfg:?}");
    }
}

#[test]
fn every_parameter_gets_a_gradient() {
    for arch in [Arch::Plain, Arch::Dilated] {
        let m = build_model(&small(arch, 4, 32), 21).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_image([2, 1, 32, 32], 22));
        let (out, vars) = m.forward(&mut g, x).unwrap();
        let mask = random_image([2, 1, 32, 32], 23).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
        let loss = segmentation_loss(&mut g, &out, &mask, 1.0).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, v) in m.params.keys().zip(vars) {
            let gr = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.data().iter().any(|&e| e != 0.0), "{name} gradient is all zero");
        }
    }
}

#[test]
fn bilinear_mode_concats_full_channels() {
    let cfg = ModelConfig {
        upsample_mode: UpsampleMode::Bilinear,
        ..small(Arch::Plain, 4, 32)
    };
    let m = build_unet(&cfg, 3).unwrap();
    assert_eq!(m.params["up3.conv1.weight"].dims(), [16, 32 + 16, 3, 3]);
    assert!(!m.params.contains_key("up3.upconv.weight"));
    let mut g = Graph::new();
    let x = g.input(random_image([1, 1, 32, 32], 4));
    let (out, _) = m.forward(&mut g, x).unwrap();
    assert_eq!(g.value(out.logits).dims(), [1, 1, 32, 32]);
}

#[test]
fn single_conv_parameter_count() {
    let mut rng = Rng::new(0);
    let mut b = Builder {
        params: IndexMap::new(),
        rng: &mut rng,
    };
    b.conv("c", 1, 8, 3).unwrap();
    let m = Model {
        config: ModelConfig::default(),
        params: b.params,
    };
    assert_eq!(m.parameter_count(), 80);
}

#[test]
fn dilated_minus_plain_is_closed_form() {
    for base in [4usize, 8, 16] {
        let plain = build_unet(&small(Arch::Plain, base, 128), 0).unwrap();
        let dil = build_dilated_unet(&small(Arch::Dilated, base, 128), 0).unwrap();
        let c = base << 3;
        // Each dilated layer: 3x3 weights, bias, PReLU slopes.
        let per_layer = 9 * c * c + c + c;
        assert_eq!(dil.parameter_count() - plain.parameter_count(), 2 * per_layer);
    }
}

#[test]
fn prelu_adds_one_slope_per_channel() {
    let m = build_unet(&ModelConfig::default(), 0).unwrap();
    assert_eq!(m.params["down2.conv1.slope"].len(), 32);
    assert!(m.params["down2.conv1.slope"].data().iter().all(|&s| s == 0.25));
}

#[test]
fn unet_receptive_field_is_68() {
    let t = receptive_field_table(&ModelConfig::default()).unwrap();
    assert_eq!(t.innermost, 68);
    assert!(!t.covers_input);
    assert_eq!(t.rows.last().unwrap().layer, "mid.conv2");
    assert_eq!(t.rows.last().unwrap().out_size, (16, 16));
    assert_eq!(t.rows.last().unwrap().jump, 8);
}

#[test]
fn dilated_receptive_field_covers_input() {
    let t = receptive_field_table(&ModelConfig::new(Arch::Dilated)).unwrap();
    assert_eq!(t.innermost, 68 + 32 + 64);
    assert!(t.covers_input);
}

#[test]
fn single_conv_receptive_field() {
    assert_eq!(receptive_field(&[RfLayer::conv3(1)]), (3, 1));
    assert_eq!(receptive_field(&[RfLayer::conv3(1), RfLayer::Pool]), (4, 2));
}

/// Independent evaluation: r grows by (k-1)·d·j per conv and by j per pool, j doubling.
#[test]
fn table_matches_hand_recurrence() {
    for depth in 1..=4 {
        for dil in [vec![2], vec![2, 4], vec![2, 4, 8]] {
            let cfg = ModelConfig {
                depth,
                dilations: dil.clone(),
                ..ModelConfig::new(Arch::Dilated)
            };
            let mut r = 1;
            for l in 0..depth {
                r += 2 * 2 * (1 << l) + (1 << l);
            }
            r += 2 * 2 * (1 << depth);
            r += dil.iter().map(|d| 2 * d * (1 << depth)).sum::<usize>();
            assert_eq!(receptive_field_table(&cfg).unwrap().innermost, r);
        }
    }
}

#[test]
fn config_kv_round_trips() {
    let cfg = ModelConfig {
        base_channels: 8,
        upsample_mode: UpsampleMode::Bilinear,
        dilations: vec![2, 4, 8],
        input_size: (64, 32),
        ..ModelConfig::new(Arch::Dilated)
    };
    assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    assert!(ModelConfig::from_kv("depth=x\n").is_err());
    assert!(ModelConfig::from_kv("colour=red\n").is_err());
}

#[test]
fn downsample_picks_window_centres() {
    let t = Tensor::<f32>::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
    assert_eq!(downsample_nearest(&t, 2).unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
    assert_eq!(downsample_nearest(&t, 4).unwrap().data(), &[10.0]);
}

#[test]
fn full_model_matches_finite_differences() {
    let cfg = small(Arch::Dilated, 2, 16);
    let m = build_dilated_unet(&cfg, 31).unwrap().cast::<f64>();
    let x = random_image([1, 1, 16, 16], 32).cast::<f64>();
    let mask = random_image([1, 1, 16, 16], 33).map(|v| if v > 0.6 { 1.0 } else { 0.0 });
    let mask = mask.cast::<f64>();
    let inputs: Vec<_> = m.params.values().cloned().collect();
    let opts = FdOptions {
        max_elems_per_input: Some(2),
        seed: 34,
        ..FdOptions::default()
    };
    let report = finite_diff_check(
        |g, vars| {
            let xi = g.input(x.clone());
            let out = m.forward_with(g, vars, xi)?;
            segmentation_loss(g, &out, &mask, 1.0)
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(report.checked > 40, "{report:?}");
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

