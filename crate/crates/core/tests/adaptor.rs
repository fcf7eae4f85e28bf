use pcd_core::adaptor::{
    adapt_head, adapt_head_with, drop_trailing_affine_free_bn, fc_to_conv1x1, fuse_conv_bn, fuse_fc_bn, random_bn,
    random_grammar_head, verify_invariance, AdaptOptions, HeadLayer, HeadSpec, InputKind,
};
use pcd_core::layers::{self, BatchNormParams, BnLayout, BnMode, FcParams};
use pcd_core::rng::Rng;
use pcd_core::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn pool(x: &Tensor) -> Tensor {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(x.clone());
    let p = layers::global_avg_pool(&mut tape, v).unwrap();
    tape.value(p).clone()
}

fn head(layers: Vec<HeadLayer>) -> HeadSpec {
    HeadSpec::new(layers, InputKind::Vector).unwrap()
}

/// FC(in→hidden)–BN–ReLU–FC(hidden→out)–BN(no affine), the usual projection head.
fn projection_head(rng: &mut Rng, inp: usize, hidden: usize, out: usize) -> HeadSpec {
    head(vec![
        HeadLayer::Fc(FcParams::kaiming(hidden, inp, true, rng).unwrap()),
        HeadLayer::Bn(random_bn(hidden, true, BnLayout::Vector, rng).unwrap()),
        HeadLayer::Relu,
        HeadLayer::Fc(FcParams::kaiming(out, hidden, true, rng).unwrap()),
        HeadLayer::Bn(random_bn(out, false, BnLayout::Vector, rng).unwrap()),
    ])
}

// ---------------------------------------------------------------------------
// fuse_fc_bn

#[test]
fn fuse_identity_bn_is_noop() {
    let mut rng = Rng::seed_from_u64(1);
    let mut fc = FcParams::kaiming(4, 3, true, &mut rng).unwrap();
    fc.bias = Some(Tensor::gaussian(&[4], 2, 1.0).unwrap());
    let mut bn = BatchNormParams::identity(4, true, BnLayout::Vector).unwrap();
    bn.eps = 0.0;
    let f = fuse_fc_bn(&fc, &bn).unwrap();
    assert!(f.weight.bit_eq(&fc.weight));
    assert!(f.bias.unwrap().bit_eq(fc.bias.as_ref().unwrap()));
}

#[test]
fn fuse_pure_scale() {
    let mut rng = Rng::seed_from_u64(3);
    let mut fc = FcParams::kaiming(4, 3, true, &mut rng).unwrap();
    fc.bias = Some(Tensor::gaussian(&[4], 4, 1.0).unwrap());
    let mut bn = BatchNormParams::identity(4, true, BnLayout::Vector).unwrap();
    bn.eps = 0.0;
    bn.gamma = Some(Tensor::full(&[4], 2.0).unwrap());
    let f = fuse_fc_bn(&fc, &bn).unwrap();
    assert!(f.weight.bit_eq(&fc.weight.map(|v| 2.0 * v)));
    assert!(f.bias.unwrap().bit_eq(&fc.bias.unwrap().map(|v| 2.0 * v)));
}

#[test]
fn fuse_matches_direct_evaluation() {
    let mut rng = Rng::seed_from_u64(5);
    let mut fc = FcParams::kaiming(6, 5, true, &mut rng).unwrap();
    fc.bias = Some(Tensor::gaussian(&[6], 6, 1.0).unwrap());
    let bn = random_bn(6, true, BnLayout::Vector, &mut rng).unwrap();
    let fused = fuse_fc_bn(&fc, &bn).unwrap();
    let orig = head(vec![HeadLayer::Fc(fc), HeadLayer::Bn(bn)]);
    let single = head(vec![HeadLayer::Fc(fused)]);
    let x = Tensor::gaussian(&[100, 5], 7, 1.0).unwrap();
    let d = orig.apply(&x).unwrap().max_abs_diff(&single.apply(&x).unwrap());
    assert!(d <= 1e-5, "{d}");
}

#[test]
fn fuse_rejects_train_mode_and_mismatch() {
    let mut rng = Rng::seed_from_u64(8);
    let fc = FcParams::kaiming(4, 3, false, &mut rng).unwrap();
    let mut bn = BatchNormParams::identity(4, true, BnLayout::Vector).unwrap();
    bn.mode = BnMode::Train;
    assert!(matches!(fuse_fc_bn(&fc, &bn), Err(Error::TrainModeBatchNorm(_))));
    let bn5 = BatchNormParams::identity(5, true, BnLayout::Vector).unwrap();
    assert!(matches!(fuse_fc_bn(&fc, &bn5), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn fusion_commutes_with_conversion() {
    let mut rng = Rng::seed_from_u64(9);
    let mut fc = FcParams::kaiming(6, 4, true, &mut rng).unwrap();
    fc.bias = Some(Tensor::gaussian(&[6], 10, 1.0).unwrap());
    let bn = random_bn(6, true, BnLayout::Map, &mut rng).unwrap();
    let a = fc_to_conv1x1(&fuse_fc_bn(&fc, &bn).unwrap());
    let b = fuse_conv_bn(&fc_to_conv1x1(&fc), &bn).unwrap();
    let x = Tensor::gaussian(&[2, 4, 3, 3], 11, 1.0).unwrap();
    let run = |c: &pcd_core::layers::ConvParams| {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x.clone());
        let y = c.forward(&mut tape, v).unwrap();
        tape.value(y).clone()
    };
    assert!(run(&a).max_abs_diff(&run(&b)) <= 1e-5);
}

// ---------------------------------------------------------------------------
// fc_to_conv1x1

#[test]
fn conv1x1_on_single_pixel_equals_fc() {
    let mut rng = Rng::seed_from_u64(12);
    let mut fc = FcParams::kaiming(5, 3, true, &mut rng).unwrap();
    fc.bias = Some(Tensor::gaussian(&[5], 13, 1.0).unwrap());
    let x = Tensor::gaussian(&[4, 3], 14, 1.0).unwrap();
    let yv = head(vec![HeadLayer::Fc(fc.clone())]).apply(&x).unwrap();
    let ym = HeadSpec::new(vec![HeadLayer::Conv1x1(fc_to_conv1x1(&fc))], InputKind::Map)
        .unwrap()
        .apply(&x.clone().reshape(&[4, 3, 1, 1]).unwrap())
        .unwrap();
    assert!(yv.bit_eq(&ym.reshape(&[4, 5]).unwrap()));
}

#[test]
fn conv1x1_commutes_with_pooling() {
    let mut rng = Rng::seed_from_u64(15);
    let fc = FcParams::kaiming(5, 3, true, &mut rng).unwrap();
    let conv = HeadSpec::new(vec![HeadLayer::Conv1x1(fc_to_conv1x1(&fc))], InputKind::Map).unwrap();
    let fc = head(vec![HeadLayer::Fc(fc)]);
    for seed in 0..10 {
        let x = Tensor::gaussian(&[2, 3, 5, 4], 100 + seed, 1.0).unwrap();
        let a = fc.apply(&pool(&x)).unwrap();
        let b = pool(&conv.apply(&x).unwrap());
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}

#[test]
fn identity_weight_conv_is_channel_identity() {
    let mut w = Tensor::zeros(&[3, 3]).unwrap();
    for i in 0..3 {
        w.set(&[i, i], 1.0);
    }
    let conv = fc_to_conv1x1(&FcParams::new(w, None).unwrap());
    assert_eq!(conv.kernel.shape(), &[3, 3, 1, 1]);
    assert_eq!((conv.stride, conv.padding), (1, 0));
    let x = Tensor::gaussian(&[1, 3, 4, 4], 16, 1.0).unwrap();
    let y = HeadSpec::new(vec![HeadLayer::Conv1x1(conv)], InputKind::Map).unwrap().apply(&x).unwrap();
    assert!(y.bit_eq(&x));
}

// ---------------------------------------------------------------------------
// adapt_head

#[test]
fn projection_head_adapts_to_conv_bn_cwrelu_conv() {
    let mut rng = Rng::seed_from_u64(17);
    let h = projection_head(&mut rng, 8, 16, 4);
    assert_eq!(h.structure(), "FC-BN-ReLU-FC-BN");
    let a = adapt_head(&h, true).unwrap();
    assert_eq!(a.structure(), "Conv-BN-CW-ReLU-Conv");
    assert_eq!(a.input_kind, InputKind::Map);
    // statistics carried over verbatim
    let (HeadLayer::Bn(src), HeadLayer::Bn(dst)) = (&h.layers[1], &a.layers[1]) else {
        panic!("expected BN at index 1");
    };
    assert_eq!(src.running_mean, dst.running_mean);
    assert_eq!(src.running_var, dst.running_var);
    assert_eq!(src.gamma, dst.gamma);
    assert_eq!(dst.layout, BnLayout::Map);

    let kept = adapt_head(&h, false).unwrap();
    assert_eq!(kept.structure(), "Conv-BN-CW-ReLU-Conv-BN");

    let original = drop_trailing_affine_free_bn(&h);
    let r = verify_invariance(&original, &a, 64, 7, 1e-5, &mut rng).unwrap();
    assert!(r.pass, "{r}");
}

#[test]
fn affine_trailing_bn_is_not_dropped() {
    let mut rng = Rng::seed_from_u64(18);
    let h = head(vec![
        HeadLayer::Fc(FcParams::kaiming(4, 3, true, &mut rng).unwrap()),
        HeadLayer::Bn(random_bn(4, true, BnLayout::Vector, &mut rng).unwrap()),
    ]);
    assert_eq!(adapt_head(&h, true).unwrap().structure(), "Conv-BN");
}

#[test]
fn single_fc_adapts_to_single_conv() {
    let mut rng = Rng::seed_from_u64(19);
    let h = head(vec![HeadLayer::Fc(FcParams::kaiming(4, 3, true, &mut rng).unwrap())]);
    assert_eq!(adapt_head(&h, true).unwrap().structure(), "Conv");
}

#[test]
fn fc_relu_head_is_invariant_over_many_inputs() {
    let mut rng = Rng::seed_from_u64(20);
    let mut fc = FcParams::kaiming(6, 4, true, &mut rng).unwrap();
    fc.bias = Some(Tensor::gaussian(&[6], 21, 0.5).unwrap());
    let h = head(vec![HeadLayer::Fc(fc), HeadLayer::Relu]);
    let a = adapt_head(&h, false).unwrap();
    for seed in 0..100 {
        let x = Tensor::gaussian(&[1, 4, 5, 5], 1000 + seed, 1.0).unwrap();
        let d = h.apply(&pool(&x)).unwrap().max_abs_diff(&pool(&a.apply(&x).unwrap()));
        assert!(d <= 1e-5, "seed {seed}: {d}");
    }
}

#[test]
fn adapting_twice_is_rejected() {
    let mut rng = Rng::seed_from_u64(22);
    let h = projection_head(&mut rng, 4, 8, 4);
    let a = adapt_head(&h, true).unwrap();
    assert!(matches!(adapt_head(&a, true), Err(Error::AlreadyAdapted)));
}

#[test]
fn unsupported_layers_are_rejected() {
    let gelu = HeadSpec {
        layers: vec![HeadLayer::Unsupported { name: "gelu".into() }],
        input_kind: InputKind::Vector,
    };
    assert!(matches!(adapt_head(&gelu, false), Err(Error::UnsupportedLayer(_))));
    assert!(HeadSpec::new(vec![HeadLayer::CwRelu], InputKind::Vector).is_err());
}

#[test]
fn chain_mismatch_is_rejected() {
    let mut rng = Rng::seed_from_u64(23);
    let r = HeadSpec::new(
        vec![
            HeadLayer::Fc(FcParams::kaiming(4, 3, true, &mut rng).unwrap()),
            HeadLayer::Fc(FcParams::kaiming(4, 5, true, &mut rng).unwrap()),
        ],
        InputKind::Vector,
    );
    assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
}

// ---------------------------------------------------------------------------
// verify_invariance

#[test]
fn random_grammar_heads_pass() {
    let mut rng = Rng::seed_from_u64(24);
    for _ in 0..50 {
        let h = random_grammar_head(&mut rng, 8, 6, 16).unwrap();
        let a = adapt_head(&h, false).unwrap();
        let r = verify_invariance(&h, &a, 16, 7, 1e-5, &mut rng).unwrap();
        assert!(r.pass, "{}: {r}", h.structure());
    }
}

#[test]
fn one_by_one_maps_have_no_deviation() {
    let mut rng = Rng::seed_from_u64(25);
    let h = projection_head(&mut rng, 6, 12, 4);
    let a = adapt_head(&h, false).unwrap();
    let r = verify_invariance(&h, &a, 32, 1, 1e-5, &mut rng).unwrap();
    assert!(r.max_abs_dev <= 1e-6, "{}", r.max_abs_dev);
}

#[test]
fn relu_variant_breaks_invariance() {
    // one channel with values [-3, 1]: pooled mean -1, but relu keeps mass 0.5
    let h = head(vec![HeadLayer::Fc(FcParams::new(t(&[1, 1], &[1.0]), None).unwrap()), HeadLayer::Relu]);
    let opts = AdaptOptions {
        drop_trailing_affine_free_bn: false,
        keep_relu: true,
    };
    let bad = adapt_head_with(&h, opts).unwrap();
    assert_eq!(bad.structure(), "Conv-ReLU");
    let x = t(&[1, 1, 1, 2], &[-3.0, 1.0]);
    assert_eq!(h.apply(&pool(&x)).unwrap().data(), &[0.0]);
    assert_eq!(pool(&bad.apply(&x).unwrap()).data(), &[0.5]);
    let good = adapt_head(&h, false).unwrap();
    assert_eq!(pool(&good.apply(&x).unwrap()).data(), &[0.0]);

    let mut rng = Rng::seed_from_u64(26);
    let h = projection_head(&mut rng, 8, 16, 4);
    let bad = adapt_head_with(&h, opts).unwrap();
    let r = verify_invariance(&h, &bad, 64, 7, 1e-5, &mut rng).unwrap();
    assert!(!r.pass, "{r}");
}

#[test]
fn dimension_mismatch_between_heads() {
    let mut rng = Rng::seed_from_u64(27);
    let h1 = projection_head(&mut rng, 6, 12, 4);
    let h2 = adapt_head(&projection_head(&mut rng, 6, 12, 5), false).unwrap();
    assert!(verify_invariance(&h1, &h2, 4, 7, 1e-5, &mut rng).is_err());
}
