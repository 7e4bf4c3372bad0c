use flcnn::model::{
    build_dncnn_like, build_flashlight, build_inception_layer, enumerate_architectures,
    initialize, load_checkpoint, save_checkpoint, ArchConfig, Architecture, GraphBuilder, Mode,
    ModelGraph, ParamKind, INCEPTION_BRANCHES,
};
use flcnn::tensor::{conv2d_forward, relu_forward, ConvParams};
use flcnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trainable count of a conv (+ optional BN) from its channel plan.
fn conv_count(k: usize, c_in: usize, c_out: usize, bn: bool) -> usize {
    k * k * c_in * c_out + c_out + if bn { 2 * c_out } else { 0 }
}

fn inception_count() -> usize {
    let mut total = 0;
    let mut widths = 0;
    for chain in INCEPTION_BRANCHES {
        let mut c = 64;
        for &(k, out) in chain {
            total += conv_count(k, c, out, true);
            c = out;
        }
        widths += c;
    }
    total + conv_count(1, widths, 64, true) + 2 * 64
}

fn closed_form(cfg: ArchConfig) -> usize {
    1_217 + 37_056 * cfg.l + 102_592 * cfg.m + 171_840 * cfg.n
}

#[test]
fn closed_form_matches_channel_plan() {
    assert_eq!(inception_count(), 171_840);
    assert_eq!(conv_count(3, 64, 64, true), 37_056);
    assert_eq!(conv_count(5, 64, 64, true), 102_592);
    assert_eq!(conv_count(3, 1, 64, false) + conv_count(3, 64, 1, false), 1_217);
}

#[test]
fn published_parameter_counts() {
    let g = build_flashlight::<f32>(ArchConfig::new(5, 4, 6));
    assert_eq!(g.count_params().0, 1_627_905);
    assert_eq!(build_dncnn_like::<f32>(15).count_params().0, 557_057);
    assert_eq!(build_dncnn_like::<f32>(0).count_params().0, 1_217);
    assert_eq!(build_dncnn_like::<f32>(1).count_params().0, 38_273);
    assert_eq!(build_flashlight::<f32>(ArchConfig::new(5, 3, 3)).count_params().0, 1_009_793);
    assert_eq!(build_flashlight::<f32>(ArchConfig::new(5, 5, 7)).count_params().0, 1_902_337);
}

#[test]
fn flashlight_breakdown() {
    let g = build_flashlight::<f32>(ArchConfig::default());
    let mut by_kind = std::collections::HashMap::new();
    for e in g.params().iter() {
        *by_kind.entry(e.kind).or_insert(0usize) += e.tensor.len();
    }
    assert_eq!(by_kind[&ParamKind::Weight], 1_614_976);
    assert_eq!(by_kind[&ParamKind::Bias], 4_097);
    assert_eq!(by_kind[&ParamKind::BnGamma] + by_kind[&ParamKind::BnBeta], 8_832);
    let (trainable, total) = g.count_params();
    assert_eq!(total - trainable, 8_832);
}

#[test]
fn graph_walk_agrees_with_closed_form_on_grid() {
    for l in 0..=5 {
        for m in [0, 3, 4, 5] {
            for n in [0, 3, 4, 5, 6, 7] {
                let cfg = ArchConfig::new(l, m, n);
                let g = build_flashlight::<f32>(cfg);
                let walked: usize = g
                    .params()
                    .iter()
                    .filter(|e| e.kind.is_trainable())
                    .map(|e| e.tensor.len())
                    .sum();
                assert_eq!(walked, closed_form(cfg), "{cfg}");
                assert_eq!(g.count_params().0, walked);
            }
        }
    }
}

#[test]
fn search_grid() {
    let grid = enumerate_architectures(&[5], &[3, 4, 5], &[3, 4, 5, 6, 7]).unwrap();
    assert_eq!(grid.len(), 15);
    assert!(grid.windows(2).all(|w| w[0].trainable_params <= w[1].trainable_params));
    assert_eq!(grid[0].arch, ArchConfig::new(5, 3, 3));
    assert_eq!(grid[0].trainable_params, 1_009_793);
    assert_eq!(grid[14].arch, ArchConfig::new(5, 5, 7));
    assert_eq!(grid[14].trainable_params, 1_902_337);
    for row in &grid {
        assert_eq!(row.trainable_params, closed_form(row.arch));
    }
    let single = enumerate_architectures(&[5], &[4], &[6]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].trainable_params, 1_627_905);
}

#[test]
fn receptive_fields() {
    assert_eq!(build_flashlight::<f32>(ArchConfig::new(5, 4, 6)).receptive_field(), 79);
    assert_eq!(build_dncnn_like::<f32>(15).receptive_field(), 35);
    assert_eq!(build_flashlight::<f32>(ArchConfig::new(0, 0, 0)).receptive_field(), 5);
    assert_eq!(build_flashlight::<f32>(ArchConfig::new(0, 0, 1)).receptive_field(), 13);
}

#[test]
fn parameter_names_are_deterministic() {
    let a = build_flashlight::<f32>(ArchConfig::new(1, 1, 2));
    let b = build_flashlight::<f32>(ArchConfig::new(1, 1, 2));
    let names = |g: &ModelGraph<f32>| g.params().iter().map(|e| e.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    let n = names(&a);
    assert_eq!(n[0], "first.conv.weight");
    assert!(n.contains(&"boost.1.b1.conv2.weight".to_string()));
    assert!(n.contains(&"warmup5.0.bn.running_var".to_string()));
    assert_eq!(n.last().unwrap(), "last.conv.bias");
}

fn initialized(cfg: ArchConfig, seed: u64) -> ModelGraph<f64> {
    let mut g = build_flashlight(cfg);
    initialize(&mut g, &mut ChaCha8Rng::seed_from_u64(seed));
    g
}

fn random_image(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn zero_last_conv<T: flcnn::Scalar>(g: &mut ModelGraph<T>) {
    for name in ["last.conv.weight", "last.conv.bias"] {
        let t = g.params_mut().get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

#[test]
fn zero_residual_path_is_exact_identity() {
    let mut g = initialized(ArchConfig::new(1, 1, 1), 3);
    zero_last_conv(&mut g);
    let z = random_image([2, 1, 12, 9], 4);
    assert_eq!(g.infer(&z).unwrap(), z);
    let (y, _) = g.forward(&z, Mode::Train).unwrap();
    assert_eq!(y, z);
}

#[test]
fn same_padding_preserves_shape_and_infer_is_deterministic() {
    let g: ModelGraph<f32> = {
        let mut g = build_flashlight(ArchConfig::new(1, 1, 1));
        initialize(&mut g, &mut ChaCha8Rng::seed_from_u64(5));
        g
    };
    let z: Tensor<f32> = random_image([2, 1, 40, 40], 6).cast();
    let a = g.infer(&z).unwrap();
    assert_eq!(a.shape(), [2, 1, 40, 40]);
    let b = g.infer(&z).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn toy_graph_matches_manual_composition() {
    let mut b = GraphBuilder::<f64>::new();
    let z = b.input(1).unwrap();
    let c1 = b.conv("a", z, 3, 3).unwrap();
    let r = b.relu(c1).unwrap();
    let c2 = b.conv("b", r, 1, 5).unwrap();
    b.subtract_from_input(c2).unwrap();
    let mut g = b.finish(Architecture::Custom).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for e in g.params_mut().iter_mut() {
        e.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let x = random_image([2, 1, 7, 6], 9);

    let p = g.params();
    let (wa, ba) = (p.get("a.weight").unwrap(), p.get("a.bias").unwrap());
    let (wb, bb) = (p.get("b.weight").unwrap(), p.get("b.bias").unwrap());
    let h = conv2d_forward(&x, &ConvParams::new(wa, ba.data()).unwrap()).unwrap();
    let h = relu_forward(&h);
    let f = conv2d_forward(&h, &ConvParams::new(wb, bb.data()).unwrap()).unwrap();
    let manual: Vec<f64> = x.data().iter().zip(f.data()).map(|(a, b)| a - b).collect();

    assert_eq!(g.infer(&x).unwrap().data(), manual.as_slice());
    assert_eq!(g.forward(&x, Mode::Train).unwrap().0.data(), manual.as_slice());
}

#[test]
fn zeroed_inception_layer_is_relu_of_input() {
    let mut b = GraphBuilder::<f64>::new();
    let x = b.input(64).unwrap();
    let out = build_inception_layer(&mut b, "boost.0", x).unwrap();
    let g = b.finish_with_output(Architecture::Custom, out).unwrap();
    // Built parameters are zero weights/biases, unit gamma, zero beta and
    // unit running statistics.
    let input = Tensor::from_fn([1, 64, 5, 5], |[_, c, y, x]| {
        ((c * 7 + y * 3 + x) % 13) as f64 * 0.3 - 1.8
    });
    let out = g.infer(&input).unwrap();
    let expect = relu_forward(&input);
    let scale = 1.0 / (1.0 + g.bn_epsilon()).sqrt();
    for (o, e) in out.data().iter().zip(expect.data()) {
        assert!((o - e * scale).abs() < 1e-12);
        assert!((o - e).abs() < 1e-4);
    }
}

#[test]
fn last_bias_gradient_is_negated_output_sum() {
    let mut g = initialized(ArchConfig::new(1, 0, 1), 10);
    let z = random_image([2, 1, 8, 8], 11);
    let (_, cache) = g.forward(&z, Mode::Train).unwrap();
    let gy = random_image([2, 1, 8, 8], 12).map(|v| v - 0.5);
    let grads = g.backward(&cache, &gy).unwrap();
    let idx = g.params().index_of("last.conv.bias").unwrap();
    let sum: f64 = gy.data().iter().sum();
    assert!((grads.get(idx).unwrap().data()[0] + sum).abs() < 1e-12);

    let (_, cache) = g.forward(&z, Mode::Train).unwrap();
    let zero = g.backward(&cache, &Tensor::zeros(z.shape())).unwrap();
    assert!(zero.flat().iter().all(|&v| v == 0.0));
    // Running statistics have no gradient slot.
    let rv = g.params().index_of("boost.0.out_bn.running_var").unwrap();
    assert!(zero.get(rv).is_none());
}

#[test]
fn train_forward_updates_running_stats_only() {
    let mut g = initialized(ArchConfig::new(1, 0, 0), 13);
    let before = g.params().clone();
    let z = random_image([1, 1, 6, 6], 14);
    g.forward(&z, Mode::Train).unwrap();
    for (a, b) in before.iter().zip(g.params().iter()) {
        if a.kind.is_trainable() {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
    }
    let rm = g.params().get("warmup3.0.bn.running_mean").unwrap();
    assert!(rm.data().iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.flcn");
    let mut g: ModelGraph<f32> = build_flashlight(ArchConfig::new(1, 1, 1));
    initialize(&mut g, &mut ChaCha8Rng::seed_from_u64(15));
    // Move running stats away from their defaults.
    let z: Tensor<f32> = random_image([2, 1, 16, 16], 16).cast();
    g.forward(&z, Mode::Train).unwrap();
    g.sigma = Some(50.0);
    save_checkpoint(&g, &path).unwrap();
    let back: ModelGraph<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), g.params());
    assert_eq!(back.arch(), g.arch());
    assert_eq!(back.sigma, Some(50.0));
    assert_eq!(back.bn_epsilon(), g.bn_epsilon());
    assert_eq!(back.bn_momentum(), g.bn_momentum());
    let a = g.infer(&z).unwrap();
    let b = back.infer(&z).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}
