use rednet_core::nnops::{
    batch_norm_apply, conv2d_raw, kernel_generate, relu, AttentionMode, BnMode, KernelGenForm,
    Window,
};
use rednet_core::rednet::{
    build_rednet, count_params, rednet_toy, GroupChannels, MiddleOp, Model, RedNetOptions,
    StemVariant,
};
use rednet_core::{Error, Prng, Tensor};

fn toy_middles() -> Vec<MiddleOp> {
    vec![
        RedNetOptions::involution(3, GroupChannels::Channels(4), 4),
        MiddleOp::Involution {
            kernel: 5,
            group_channels: GroupChannels::All,
            reduction: 1,
            form: KernelGenForm::Linear,
        },
        MiddleOp::Conv3x3,
        MiddleOp::Depthwise3x3,
        MiddleOp::Attention {
            window: 3,
            heads: 2,
            mode: AttentionMode::Content,
            softmax: false,
        },
        MiddleOp::Attention {
            window: 3,
            heads: 4,
            mode: AttentionMode::Position,
            softmax: true,
        },
    ]
}

fn image(b: usize, hw: usize, seed: u64) -> Tensor {
    Tensor::randn(&[b, 3, hw, hw], 1.0, &mut Prng::new(seed)).unwrap()
}

#[test]
fn toy_logits_shape_for_every_middle_op() {
    for stem in [StemVariant::Conv7, StemVariant::InvStem] {
        for m in toy_middles() {
            let arch = rednet_toy(4, m, stem);
            let mut model = Model::new(&arch, 1).unwrap();
            let y = model.forward(&image(2, 32, 9)).unwrap();
            assert_eq!(y.shape(), &[2, 4], "{m:?}");
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn instantiated_params_match_the_cost_model_row_by_row() {
    let mut archs: Vec<_> = toy_middles()
        .into_iter()
        .flat_map(|m| {
            [
                rednet_toy(10, m, StemVariant::Conv7),
                rednet_toy(10, m, StemVariant::InvStem),
            ]
        })
        .collect();
    archs.push(build_rednet(26, RedNetOptions::default()).unwrap());
    for arch in archs {
        let model = Model::new(&arch, 0).unwrap();
        let report = count_params(&arch);
        assert_eq!(
            model.params().numel() as u64,
            report.total_params,
            "{}",
            arch.name
        );
        for row in &report.rows {
            let prefix = format!("{}.", row.name);
            let n: usize = model
                .params()
                .iter()
                .filter(|(_, p)| p.name.starts_with(&prefix))
                .map(|(_, p)| p.value.len())
                .sum();
            assert_eq!(n as u64, row.params, "{} {}", arch.name, row.name);
        }
    }
}

#[test]
fn zero_classifier_gives_zero_logits() {
    let arch = rednet_toy(3, RedNetOptions::default().middle, StemVariant::InvStem);
    let mut model = Model::new(&arch, 5).unwrap();
    for name in ["fc.weight", "fc.bias"] {
        let id = model.params().find(name).unwrap();
        let shape = model.params().value(id).shape().to_vec();
        model
            .params_mut()
            .set(id, Tensor::zeros(&shape).unwrap())
            .unwrap();
    }
    let y = model.forward(&image(2, 32, 1)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let arch = rednet_toy(4, RedNetOptions::default().middle, StemVariant::InvStem);
    let x = image(2, 32, 3);
    let mut a = Model::new(&arch, 11).unwrap();
    let mut b = Model::new(&arch, 11).unwrap();
    a.set_mode(BnMode::Eval);
    b.set_mode(BnMode::Eval);
    let ya = a.forward(&x).unwrap();
    assert_eq!(ya, a.forward(&x).unwrap());
    assert_eq!(ya, b.forward(&x).unwrap());
}

#[test]
fn train_mode_updates_running_stats_and_eval_does_not() {
    let arch = rednet_toy(4, RedNetOptions::default().middle, StemVariant::InvStem);
    let mut m = Model::new(&arch, 2).unwrap();
    let snapshot = |m: &Model| {
        m.running_stats()
            .map(|(_, a, b)| (a.clone(), b.clone()))
            .collect::<Vec<_>>()
    };
    let before = snapshot(&m);
    m.set_mode(BnMode::Eval);
    m.forward(&image(2, 32, 4)).unwrap();
    assert_eq!(before, snapshot(&m));
    m.set_mode(BnMode::Train);
    m.forward(&image(2, 32, 4)).unwrap();
    let after = snapshot(&m);
    assert!(before.iter().zip(&after).all(|(a, b)| a != b));
    assert!(after
        .iter()
        .all(|(_, v)| v.data().iter().all(|&x| x >= 0.0)));
    assert!(m.running_stats().any(|(n, _, _)| n == "stem.inv.reduce_bn"));
}

#[test]
fn rejects_bad_inputs() {
    let arch = rednet_toy(4, MiddleOp::Conv3x3, StemVariant::Conv7);
    let mut m = Model::new(&arch, 0).unwrap();
    assert!(m.forward(&image(1, 40, 0)).is_err());
    assert!(m.forward(&Tensor::zeros(&[1, 1, 32, 32]).unwrap()).is_err());
}

#[test]
fn rednet50_conv3_4_kernels() {
    let arch = build_rednet(50, RedNetOptions::default()).unwrap();
    // untrained running statistics do not normalise, so use batch statistics
    let model = Model::new(&arch, 0).unwrap();
    let one = image(1, 224, 8);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let x = Tensor::new(&[2, 3, 224, 224], two).unwrap();
    let k = model.extract_kernels(&x, "conv3_4").unwrap();
    assert_eq!(k.shape(), &[2, 16, 49, 14, 14]);
    assert!(k.data().iter().all(|v| v.is_finite()));
    let half = k.len() / 2;
    assert_eq!(k.data()[..half], k.data()[half..]);
    assert_eq!(
        model.resolve_involution("conv3_4").unwrap(),
        "conv3_4.conv2"
    );
    assert!(matches!(
        model.extract_kernels(&x, "conv3_4.conv1"),
        Err(Error::NotInvolution(_))
    ));
    assert!(matches!(
        model.extract_kernels(&x, "conv9_9"),
        Err(Error::LayerNotFound(_))
    ));
}

#[test]
fn conv_middle_is_not_an_involution() {
    let arch = rednet_toy(4, MiddleOp::Conv3x3, StemVariant::Conv7);
    let model = Model::new(&arch, 0).unwrap();
    assert!(matches!(
        model.extract_kernels(&image(1, 32, 0), "conv2_1"),
        Err(Error::NotInvolution(_))
    ));
    assert!(model.involution_layers().is_empty());
}

#[test]
fn extracted_stem_kernels_match_the_tape_free_operator() {
    let arch = rednet_toy(4, RedNetOptions::default().middle, StemVariant::InvStem);
    let mut model = Model::new(&arch, 21).unwrap();
    model.set_mode(BnMode::Eval);
    let x = image(2, 32, 6);
    let p = model.params();
    let w = p.value(p.find("stem.conv1.weight").unwrap());
    let h = conv2d_raw(&x, w, Window::same(3, 2, 1).unwrap(), 1).unwrap();
    let mut bn = rednet_core::nnops::BatchNormState::new(8).unwrap();
    bn.mode = BnMode::Eval;
    let h = relu(&batch_norm_apply(&h, &bn).unwrap());
    let spec = model.involution_spec("stem.inv").unwrap();
    assert_eq!(spec.groups, 2);
    assert_eq!(spec.reduction, 4);
    let want = kernel_generate(&h, &spec).unwrap();
    let got = model.extract_kernels(&x, "stem.inv").unwrap();
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}
