use cslid_tensor::gradcheck::finite_diff_check;
use cslid_tensor::{BnMode, Init, TensorError};
use rand::SeedableRng;

use super::*;

fn feat(frames: usize, bins: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * bins).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    FeatureMatrix::new(frames, bins, data).unwrap()
}

fn tiny_crnn() -> CrnnConfig {
    CrnnConfig {
        n_mels: 16,
        channels: vec![2, 4],
        time_strides: vec![2, 1],
        gru_layers: 2,
        hidden: 5,
        ..CrnnConfig::default()
    }
}

fn tiny_mtl() -> MtlConfig {
    MtlConfig {
        n_mels: 8,
        stack: 2,
        d_model: 8,
        heads: 2,
        ff_mult: 2,
        conv_kernel: 3,
        blocks: 1,
        lid_hidden: 4,
        vocab_size: 6,
        ..MtlConfig::default()
    }
}

fn tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => panic!("unexpected error {other}"),
    }
}

fn residual_gradcheck(c_in: usize, c_out: usize, stride: (usize, usize), seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = c_in != c_out || stride != (1, 1);
    let mut inputs = vec![
        cslid_tensor::init_tensor(&[c_in, 5, 6], Init::Uniform(1.0), &mut rng),
        cslid_tensor::init_tensor(&[c_in, 4, 6], Init::Uniform(1.0), &mut rng),
        cslid_tensor::init_tensor(&[c_out, c_in, 3, 3], Init::Uniform(0.5), &mut rng),
        cslid_tensor::init_tensor(&[c_out], Init::Uniform(1.0), &mut rng),
        cslid_tensor::init_tensor(&[c_out], Init::Uniform(1.0), &mut rng),
        cslid_tensor::init_tensor(&[c_out, c_out, 3, 3], Init::Uniform(0.5), &mut rng),
        cslid_tensor::init_tensor(&[c_out], Init::Uniform(1.0), &mut rng),
        cslid_tensor::init_tensor(&[c_out], Init::Uniform(1.0), &mut rng),
    ];
    if projection {
        inputs.push(cslid_tensor::init_tensor(&[c_out, c_in, 1, 1], Init::Uniform(1.0), &mut rng));
    }
    let check = finite_diff_check(
        |tape, v| {
            let vars = ResidualVars {
                conv1: v[2],
                gamma1: v[3],
                beta1: v[4],
                conv2: v[5],
                gamma2: v[6],
                beta2: v[7],
                shortcut: v.get(8).copied(),
            };
            let (out, _) = residual_block(tape, &v[..2], &vars, stride, [BnMode::Batch, BnMode::Batch]).map_err(tensor_err)?;
            tape.concat(&out, 1)
        },
        &inputs,
        1e-6,
        &mut rng,
    )
    .unwrap();
    check.max_rel_error
}

#[test]
fn residual_block_gradients_match_finite_differences() {
    for seed in 0..4 {
        assert!(residual_gradcheck(2, 3, (2, 2), seed) < 1e-5, "projection, seed {seed}");
        assert!(residual_gradcheck(3, 3, (1, 1), seed) < 1e-5, "identity, seed {seed}");
    }
}

#[test]
fn residual_block_output_shape_follows_strides() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(cslid_tensor::init_tensor(&[1, 9, 16], Init::Uniform(1.0), &mut rng));
    let mut p = |shape: &[usize]| tape_var(&mut tape, shape, &mut rng);
    let vars = ResidualVars {
        conv1: p(&[4, 1, 3, 3]),
        gamma1: p(&[4]),
        beta1: p(&[4]),
        conv2: p(&[4, 4, 3, 3]),
        gamma2: p(&[4]),
        beta2: p(&[4]),
        shortcut: Some(p(&[4, 1, 1, 1])),
    };
    let (out, stats) = residual_block(&mut tape, &[x], &vars, (2, 2), [BnMode::Batch, BnMode::Batch]).unwrap();
    assert_eq!(tape.shape(out[0]), &[4, 5, 8]);
    assert!(stats.iter().all(|s| s.as_ref().is_some_and(|s| s.mean.len() == 4)));
}

fn tape_var(tape: &mut Tape<f64>, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    tape.variable(cslid_tensor::init_tensor(shape, Init::Uniform(0.5), rng))
}

#[test]
fn crnn_produces_two_logits_per_utterance() {
    let model = Model::<f32>::new(&ModelConfig::Crnn(tiny_crnn()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (a, b) = (feat(12, 16, 1), feat(7, 16, 2));
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = ForwardCtx::train(&mut rng);
    let logits = model.lid_logits(&mut tape, &[&a, &b], &mut ctx).unwrap();
    assert_eq!(tape.shape(logits), &[2, 2]);
    // two blocks with two norms each
    assert_eq!(ctx.bn_updates.len(), 4);
}

#[test]
fn crnn_rejects_short_or_mismatched_input() {
    let model = Model::<f32>::new(&ModelConfig::Crnn(tiny_crnn()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = model.predict(&[&feat(1, 16, 1)]).unwrap_err();
    assert!(matches!(err, CoreError::InputTooShort { frames: 1, needed: 2 }));
    assert!(matches!(model.predict(&[&feat(10, 15, 1)]), Err(CoreError::InvalidArgument(_))));
    assert!(matches!(
        model.lid_logits(&mut Tape::new(), &[], &mut ForwardCtx::eval()),
        Err(CoreError::EmptyInput(_))
    ));
}

#[test]
fn same_seed_gives_same_model_and_predictions() {
    let cfg = ModelConfig::Crnn(tiny_crnn());
    let m1 = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let m2 = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let f = feat(10, 16, 4);
    assert_eq!(m1.predict(&[&f]).unwrap(), m2.predict(&[&f]).unwrap());
}

#[test]
fn bn_updates_move_running_statistics_by_momentum() {
    let mut model = Model::<f64>::new(&ModelConfig::Crnn(tiny_crnn()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let id = model.store().id_of("crnn.block0.bn1.running_mean").unwrap();
    let vid = model.store().id_of("crnn.block0.bn1.running_var").unwrap();
    let update = BnUpdate {
        mean: id,
        var: vid,
        stats: cslid_tensor::BnStats {
            mean: vec![2.0, -1.0],
            var: vec![3.0, 0.5],
        },
    };
    model.apply_bn_updates(&[update]);
    let mean = model.store().get(id).value.data();
    let var = model.store().get(vid).value.data();
    assert!((mean[0] - 0.2).abs() < 1e-12 && (mean[1] + 0.1).abs() < 1e-12);
    assert!((var[0] - 1.2).abs() < 1e-12 && (var[1] - 0.95).abs() < 1e-12);
}

#[test]
fn mtl_heads_have_expected_shapes() {
    for encoder in [EncoderKind::Conformer, EncoderKind::Recurrent] {
        let cfg = MtlConfig { encoder, ..tiny_mtl() };
        let model = Mtl::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = feat(11, 8, 1);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &f, true, &mut ForwardCtx::eval()).unwrap();
        let lp = out.ctc_log_probs.unwrap();
        assert_eq!(tape.shape(lp), &[5, 6]);
        for row in tape.value(lp).data().chunks(6) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert_eq!(tape.shape(out.lid_logits), &[1, 2]);
        let skipped = model.forward(&mut Tape::new(), &f, false, &mut ForwardCtx::eval()).unwrap();
        assert!(skipped.ctc_log_probs.is_none());
    }
}

#[test]
fn mtl_encoder_receives_gradient_from_both_heads() {
    let model = Mtl::<f64>::new(&tiny_mtl(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let f = feat(12, 8, 2);
    let enc_w = model.store.id_of("mtl.input.w").unwrap();
    let grad_norm = |use_ctc: bool| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &f, true, &mut ForwardCtx::eval()).unwrap();
        let loss = if use_ctc {
            tape.ctc_loss(out.ctc_log_probs.unwrap(), &[2, 3]).unwrap()
        } else {
            tape.softmax_cross_entropy(out.lid_logits, &[1]).unwrap()
        };
        let grads = tape.backward(loss).unwrap();
        let w = tape.param(&model.store, enc_w);
        grads.get(w).unwrap().iter().map(|g| g * g).sum::<f64>().sqrt()
    };
    assert!(grad_norm(true) > 0.0);
    assert!(grad_norm(false) > 0.0);
}

#[test]
fn mtl_rejects_input_shorter_than_stack() {
    let model = Mtl::<f32>::new(&tiny_mtl(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = model.encode(&mut Tape::new(), &feat(1, 8, 0), &mut ForwardCtx::eval()).unwrap_err();
    assert!(matches!(err, CoreError::InputTooShort { frames: 1, needed: 2 }));
}

#[test]
fn joint_loss_matches_formula_at_reported_weights() {
    // lambda 0.2, alpha 100
    let l = joint_loss(3.0, 0.5, 0.2, 100.0).unwrap();
    assert!((l - (0.8 * 3.0 + 0.2 * 0.5 * 100.0)).abs() < 1e-12);
    assert_eq!(joint_loss(3.0, 0.5, 0.0, 1.0).unwrap(), 3.0);
    assert_eq!(joint_loss(3.0, 0.5, 1.0, 2.0).unwrap(), 1.0);
    assert!(joint_loss(1.0, 1.0, 1.5, 1.0).is_err());
    assert!(joint_loss(1.0, 1.0, 0.5, 0.0).is_err());

    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.variable(Tensor::scalar(3.0)), tape.variable(Tensor::scalar(0.5)));
    let j = joint_loss_tape(&mut tape, a, b, 0.2, 100.0).unwrap();
    assert!((tape.scalar(j) - l).abs() < 1e-12);
}

#[test]
fn prediction_breaks_ties_toward_english() {
    let p = predict_language(&[0.3, 0.3]).unwrap();
    assert_eq!(p.language, Language::En);
    assert!((p.zh_score - 0.5).abs() < 1e-12);
    let p = predict_language(&[0.0, 2.0]).unwrap();
    assert_eq!(p.language, Language::Zh);
    assert!((p.score - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-12);
    assert!(predict_language(&[1.0]).is_err());
    assert!(predict_language(&[f64::NAN, 0.0]).is_err());
}

#[test]
fn feature_tensor_removes_utterance_mean() {
    let f = FeatureMatrix::new(2, 2, vec![1.0, 10.0, 3.0, 22.0]).unwrap();
    let t = feature_tensor::<f64>(&f, true);
    assert_eq!(t.shape(), &[1, 2, 2]);
    assert_eq!(t.data(), &[-8.0, 1.0, -6.0, 13.0]);
}

#[test]
fn checkpoint_round_trips_parameters_and_meta() {
    let cfg = ModelConfig::Mtl(tiny_mtl());
    let model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let meta = checkpoint::CheckpointMeta {
        epoch: 3,
        metric: Some(0.75),
    };
    let bytes = checkpoint::encode(&model, &meta).unwrap();
    let (back, m) = checkpoint::decode::<f32>(&bytes, Some(&cfg)).unwrap();
    assert_eq!(m, meta);
    for ((_, a), (_, b)) in model.store().iter().zip(back.store().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn checkpoint_detects_corruption_and_config_mismatch() {
    let cfg = ModelConfig::Crnn(tiny_crnn());
    let model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let meta = checkpoint::CheckpointMeta { epoch: 0, metric: None };
    let bytes = checkpoint::encode(&model, &meta).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(checkpoint::decode::<f32>(&flipped, None), Err(CoreError::Integrity(_))));
    assert!(matches!(
        checkpoint::decode::<f32>(&bytes[..bytes.len() - 9], None),
        Err(CoreError::Integrity(_))
    ));
    let other = ModelConfig::Crnn(CrnnConfig { hidden: 6, ..tiny_crnn() });
    assert!(matches!(
        checkpoint::decode::<f32>(&bytes, Some(&other)),
        Err(CoreError::ConfigMismatch { .. })
    ));
}

#[test]
fn model_config_is_tagged_by_kind() {
    let cfg = ModelConfig::Crnn(CrnnConfig::desk());
    let json = serde_json::to_string(&cfg).unwrap();
    assert!(json.starts_with(r#"{"kind":"crnn""#));
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    let partial: ModelConfig = serde_json::from_str(r#"{"kind":"mtl","d_model":16,"heads":2}"#).unwrap();
    let ModelConfig::Mtl(m) = partial else { panic!() };
    assert_eq!((m.d_model, m.stack), (16, 4));
    assert!(serde_json::from_str::<ModelConfig>(r#"{"kind":"crnn","hiden":3}"#).is_err());
}
