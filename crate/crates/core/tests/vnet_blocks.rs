mod common;

use cascade_core::autodiff::{Graph, Mode, Var};
use cascade_core::tensor::Tensor;
use cascade_core::vnet::{
    build_network, conv_block, forward, predict, residual_adapter, residual_block, BatchNormState, BnVars, BoundParams, ConvVars,
    ModelParams, NetworkConfig, SpatialChange,
};
use cascade_core::Error;

fn small(out_classes: usize, base: usize) -> NetworkConfig {
    NetworkConfig {
        out_classes,
        levels: 2,
        base_channels: base,
        convs_per_level: vec![1, 1],
        flair_concat: out_classes == 2,
        ..NetworkConfig::default()
    }
}

struct BlockParams {
    conv: ConvVars,
    bn: BnVars,
    state: BatchNormState<f64>,
}

fn block_params(g: &mut Graph<f64>, seed: u64, cin: usize, cout: usize, zero: bool) -> BlockParams {
    let mut rng = common::rng(seed);
    let mut w = common::random_tensor(&mut rng, &[cout, cin, 3, 3, 3]);
    let mut b = common::random_tensor(&mut rng, &[cout]);
    if zero {
        w = Tensor::zeros(w.shape());
        b = Tensor::zeros(b.shape());
    }
    let state = BatchNormState::new(cout, 0.9, 1e-5);
    BlockParams {
        conv: ConvVars {
            weight: g.param(w),
            bias: g.param(b),
        },
        bn: BnVars {
            gamma: g.param(state.gamma.clone()),
            beta: g.param(state.beta.clone()),
        },
        state,
    }
}

fn apply(g: &mut Graph<f64>, x: Var, p: &BlockParams) -> cascade_core::Result<Var> {
    Ok(conv_block(g, x, p.conv, p.bn, &p.state, Mode::Train)?.0)
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = small(2, 4);
    let params = build_network(&cfg, 0).unwrap();
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k * k + cout;
    let bn = |c: usize| 2 * c;
    // level 0 at 4 channels (no input adapter: 4 modalities already), level 1 at 8
    let enc0 = conv(4, 4, 3) + bn(4);
    let enc1 = conv(8, 4, 1) + conv(8, 4, 2) + bn(8) + conv(8, 8, 3) + bn(8);
    // transposed up-conv: weight 8*4*8, one bias per output channel
    let dec0 = conv(4, 8, 1) + (8 * 4 * 8 + 4) + bn(4) + conv(4, 8, 3) + bn(4);
    let flair = conv(4, 5, 3) + bn(4);
    let head = conv(2, 4, 1);
    let expect = enc0 + enc1 + dec0 + flair + head;
    assert_eq!(expect, 4258);
    assert_eq!(params.parameter_count(), expect);
}

#[test]
fn builds_are_a_pure_function_of_config_and_seed() {
    let cfg = small(4, 4);
    assert_eq!(build_network(&cfg, 5).unwrap(), build_network(&cfg, 5).unwrap());
    assert_ne!(build_network(&cfg, 5).unwrap(), build_network(&cfg, 6).unwrap());
}

#[test]
fn conv_block_of_zeros_is_zero_and_keeps_shape() {
    let mut rng = common::rng(1);
    let mut g = Graph::new();
    let w = g.param(common::random_tensor(&mut rng, &[3, 2, 3, 3, 3]));
    let b = g.param(Tensor::zeros(&[3]));
    let state = BatchNormState::new(3, 0.9, 1e-5);
    let gamma = g.param(state.gamma.clone());
    let beta = g.param(state.beta.clone());
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 6, 2]));
    let (y, _) = conv_block(&mut g, x, ConvVars { weight: w, bias: b }, BnVars { gamma, beta }, &state, Mode::Train).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 4, 6, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_block_matches_finite_differences() {
    let mut rng = common::rng(2);
    let x = common::random_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let w = common::random_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    let b = common::random_tensor(&mut rng, &[3]);
    let gamma = Tensor::from_vec(&[3], vec![1.0, 0.7, 1.3]).unwrap();
    let beta = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.05]).unwrap();
    let probe = common::random_tensor(&mut rng, &[1, 3, 4, 4, 4]);
    let state = BatchNormState::new(3, 0.9, 1e-5);
    let report = common::grad_check(&[x, w, b, gamma, beta], 1e-3, 1e-4, 1e-6, |g, v| {
        let (y, _) = conv_block(g, v[0], ConvVars { weight: v[1], bias: v[2] }, BnVars { gamma: v[3], beta: v[4] }, &state, Mode::Train).unwrap();
        let c = g.constant(probe.clone());
        let m = g.mul(y, c).unwrap();
        g.sum(m)
    });
    assert!(report.checked > 100);
    assert!(report.failures.is_empty(), "{} failures, worst {}", report.failures.len(), report.worst);
}

#[test]
fn zero_body_makes_the_residual_an_identity() {
    let mut g = Graph::new();
    let mut rng = common::rng(3);
    let xt = common::random_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let x = g.constant(xt.clone());
    let p = block_params(&mut g, 4, 2, 2, true);
    let y = residual_block(&mut g, x, |g, x| apply(g, x, &p)).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn skip_path_adds_one_to_every_input_gradient() {
    let mut rng = common::rng(5);
    let xt = common::random_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let grad = |residual: bool| {
        let mut g = Graph::new();
        let x = g.param(xt.clone());
        let p = block_params(&mut g, 6, 2, 2, false);
        let y = if residual {
            residual_block(&mut g, x, |g, x| apply(g, x, &p)).unwrap()
        } else {
            apply(&mut g, x, &p).unwrap()
        };
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.grad(x).unwrap().clone()
    };
    let (with, without) = (grad(true), grad(false));
    for (a, b) in with.data().iter().zip(without.data()) {
        assert!((a - b - 1.0).abs() < 1e-12, "{a} - {b}");
    }
}

#[test]
fn body_order_matters() {
    let mut rng = common::rng(7);
    let xt = common::random_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let mut g = Graph::new();
    let x = g.constant(xt);
    let a = block_params(&mut g, 8, 2, 2, false);
    let b = block_params(&mut g, 9, 2, 2, false);
    let ab = residual_block(&mut g, x, |g, x| {
        let y = apply(g, x, &a)?;
        apply(g, y, &b)
    })
    .unwrap();
    let ba = residual_block(&mut g, x, |g, x| {
        let y = apply(g, x, &b)?;
        apply(g, y, &a)
    })
    .unwrap();
    assert_ne!(g.value(ab), g.value(ba));
}

#[test]
fn residual_rejects_a_shape_changing_body() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let p = block_params(&mut g, 10, 2, 3, false);
    let err = residual_block(&mut g, x, |g, x| apply(g, x, &p)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("residual_adapter"));
}

#[test]
fn adapter_examples() {
    let mut rng = common::rng(11);
    let xt = common::random_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    assert_eq!(residual_adapter(&mut g, x, None, SpatialChange::None).unwrap(), x);

    let w = g.constant(Tensor::from_vec(&[4, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[4]));
    let y = residual_adapter(&mut g, x, Some(ConvVars { weight: w, bias: b }), SpatialChange::None).unwrap();
    let y = g.value(y);
    let vol = 64;
    for ch in 0..4 {
        assert_eq!(&y.data()[ch * vol..(ch + 1) * vol], &xt.data()[(ch % 2) * vol..(ch % 2 + 1) * vol]);
    }

    let down = residual_adapter(&mut g, x, None, SpatialChange::Down).unwrap();
    assert_eq!(g.value(down).shape(), &[1, 2, 2, 2, 2]);
    let up = residual_adapter(&mut g, down, None, SpatialChange::Up).unwrap();
    assert_eq!(g.value(up).shape(), xt.shape());
}

#[test]
fn forward_shapes_for_both_stages() {
    let mut rng = common::rng(12);
    let input = common::random_tensor(&mut rng, &[1, 4, 16, 16, 16]).cast::<f32>();
    for (cfg, classes) in [(NetworkConfig::net1(), 2), (NetworkConfig::net2(), 4)] {
        let params = build_network(&cfg, 1).unwrap();
        let probs = predict(&cfg, &params, &input).unwrap();
        assert_eq!(probs.shape(), &[1, classes, 16, 16, 16]);
        let vol = 16 * 16 * 16;
        for i in 0..vol {
            let s: f32 = (0..classes).map(|c| probs.data()[c * vol + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn flair_connection_is_live() {
    let cfg = small(2, 4);
    let params = build_network(&cfg, 13).unwrap();
    let mut rng = common::rng(14);
    let input = common::random_tensor(&mut rng, &[1, 4, 8, 8, 8]).cast::<f32>();
    // same weights with the FLAIR concatenation and its conv block removed
    let ablated_cfg = NetworkConfig {
        flair_concat: false,
        ..cfg.clone()
    };
    let layers = params
        .layers()
        .iter()
        .filter(|(n, _)| !n.starts_with("flair."))
        .map(|(n, l)| (n.clone(), l.clone()))
        .collect();
    let ablated = ModelParams::from_layers(layers);
    let with = predict(&cfg, &params, &input).unwrap();
    let without = predict(&ablated_cfg, &ablated, &input).unwrap();
    assert_eq!(with.shape(), without.shape());
    assert_ne!(with, without);
}

#[test]
fn non_finite_activation_names_the_layer() {
    let cfg = small(2, 2);
    let mut params = build_network(&cfg, 15).unwrap();
    params.conv_mut("enc1.down").unwrap().weight.data_mut()[0] = f32::NAN;
    let input = Tensor::full(&[1, 4, 8, 8, 8], 0.5f32);
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &params, false);
    let x = g.constant(input);
    let err = forward(&mut g, &cfg, &params, &bound, x, Mode::Infer).err().expect("NaN must be caught");
    match err {
        Error::NonFinite { location } => assert!(location.contains("enc1.down"), "{location}"),
        other => panic!("unexpected {other}"),
    }
}
