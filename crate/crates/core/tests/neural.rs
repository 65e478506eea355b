use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use storyboard_core::nn::{
    grad_check, nce_loss, train_orderer, train_retrieval_head, Bundle, Checkpoint, Conditioning, HeadConfig,
    NegativePolicy, OrdererConfig, OrdererModel, RetrievalExample, RetrievalHead, SequenceExample, TrainConfig,
};
use storyboard_core::vq::{Codebook, VqVariant};
use storyboard_core::Error;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a: Array2<f64> = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    a
}

fn sequences(seed: u64, count: usize, text_dim: usize, frame_dim: usize) -> Vec<SequenceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| SequenceExample {
            example_id: format!("ex{i}"),
            text: unit_rows(&mut rng, 3, text_dim),
            frames: unit_rows(&mut rng, 2 + i % 3, frame_dim),
        })
        .collect()
}

fn tiny_config(cond: Conditioning) -> OrdererConfig {
    let mut c = OrdererConfig::new(6, 5, 4);
    c.model_dim = 8;
    c.depth = 2;
    c.heads = 2;
    c.max_text_tokens = 4;
    c.max_frames = 6;
    c.conditioning = cond;
    c
}

#[test]
fn gradients_match_finite_differences_over_ten_seeds() {
    for seed in 0..10u64 {
        let cond = if seed % 2 == 0 { Conditioning::Prefix } else { Conditioning::CrossAttention };
        let model = OrdererModel::new(tiny_config(cond), seed).unwrap();
        let cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, seed + 100).unwrap();
        let probe = sequences(seed + 200, 3, 6, 5);
        let policy = if seed % 3 == 0 { NegativePolicy::AllTargets } else { NegativePolicy::OtherSequences };
        let r = grad_check(&model, &cb, &probe, 1e-4, 1.0, policy).unwrap();
        assert!(r.checked > 1000);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {} in {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn gradients_without_quantization() {
    let mut c = tiny_config(Conditioning::Prefix);
    c.use_vq = false;
    let model = OrdererModel::new(c, 3).unwrap();
    let cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 1).unwrap();
    let r = grad_check(&model, &cb, &sequences(4, 3, 6, 5), 1e-4, 1.0, NegativePolicy::OtherSequences).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} in {}", r.max_rel_error, r.worst);
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 3e-3,
        warmup_fraction: 0.0,
        total_steps: 50,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_repeated_batch() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let data = sequences(seed, 4, 6, 5);
        let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), seed).unwrap();
        let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, seed).unwrap();
        let curve = train_orderer(&mut model, &mut cb, &data, &overfit_config(seed)).unwrap();
        assert_eq!(curve.len(), 50);
        if curve[49].total < curve[0].total {
            wins += 1;
        }
    }
    assert!(wins >= 9, "only {wins}/10 seeds improved");
}

#[test]
fn training_is_deterministic() {
    let data = sequences(1, 6, 6, 5);
    let run = || {
        let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), 2).unwrap();
        let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 2).unwrap();
        let mut cfg = overfit_config(9);
        cfg.total_steps = 10;
        let curve = train_orderer(&mut model, &mut cb, &data, &cfg).unwrap();
        (curve, model.params, cb.books)
    };
    let (a, pa, ba) = run();
    let (b, pb, bb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(ba, bb);
}

#[test]
fn zero_lambda_leaves_codebook_alone() {
    let data = sequences(5, 4, 6, 5);
    let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), 1).unwrap();
    let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 1).unwrap();
    let before = cb.books.clone();
    let mut cfg = overfit_config(1);
    cfg.lambda_vq = 0.0;
    cfg.dead_code_window = 1;
    train_orderer(&mut model, &mut cb, &data, &cfg).unwrap();
    assert_eq!(cb.books, before);
}

#[test]
fn lambda_sweep_runs() {
    let data = sequences(6, 4, 6, 5);
    for lambda in [0.1, 1.0, 10.0] {
        let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), 1).unwrap();
        let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 1).unwrap();
        let mut cfg = overfit_config(1);
        cfg.lambda_vq = lambda;
        cfg.total_steps = 5;
        let curve = train_orderer(&mut model, &mut cb, &data, &cfg).unwrap();
        assert!(curve.iter().all(|r| r.total.is_finite()));
        let r = &curve[0];
        assert!((r.total - (r.trans + lambda * r.vq)).abs() < 1e-12);
    }
}

#[test]
fn zero_rate_step_keeps_parameters() {
    let data = sequences(7, 4, 6, 5);
    let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), 1).unwrap();
    let before = model.params.clone();
    let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 1).unwrap();
    let mut cfg = overfit_config(1);
    cfg.learning_rate = 0.0;
    cfg.total_steps = 1;
    train_orderer(&mut model, &mut cb, &data, &cfg).unwrap();
    assert_eq!(model.params, before);
}

#[test]
fn batch_size_one_is_rejected() {
    let data = sequences(7, 4, 6, 5);
    let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), 1).unwrap();
    let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 1).unwrap();
    let mut cfg = overfit_config(1);
    cfg.batch_size = 1;
    assert!(train_orderer(&mut model, &mut cb, &data, &cfg).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let mut data = sequences(8, 4, 6, 5);
    data[0].frames[[0, 0]] = f64::NAN;
    let mut model = OrdererModel::new(tiny_config(Conditioning::Prefix), 1).unwrap();
    let mut cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, 1).unwrap();
    let err = train_orderer(&mut model, &mut cb, &data, &overfit_config(1)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
}

#[test]
fn nce_oracles_through_public_api() {
    let e = std::f64::consts::E;
    let p = vec![vec![1.0, 0.0]];
    let neg = vec![vec![vec![0.0, 1.0]]];
    assert!((nce_loss(&p, &p, &neg, 1.0) + (e / (e + 1.0)).ln()).abs() < 1e-12);
}

#[test]
fn retrieval_head_overfits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<RetrievalExample> = (0..4)
        .map(|_| RetrievalExample {
            text: unit_rows(&mut rng, 1, 6).row(0).to_vec(),
            frames: unit_rows(&mut rng, 3, 6).rows().into_iter().map(|r| r.to_vec()).collect(),
        })
        .collect();
    let run = || {
        let mut head = RetrievalHead::new(
            HeadConfig {
                text_dim: 6,
                frame_dim: 6,
                shared_dim: 6,
            },
            1,
        )
        .unwrap();
        let mut cfg = overfit_config(2);
        cfg.total_steps = 60;
        (train_retrieval_head(&mut head, &data, &cfg).unwrap(), head.params)
    };
    let (curve, params) = run();
    let first: f64 = curve[..3].iter().map(|r| r.total).sum();
    let last: f64 = curve[57..].iter().map(|r| r.total).sum();
    assert!(last < first);
    assert_eq!(run().1, params);
}

fn bundle() -> Bundle {
    let mut c = tiny_config(Conditioning::CrossAttention);
    c.use_vq = true;
    Bundle {
        orderer: Some(OrdererModel::new(c, 4).unwrap()),
        codebook: Some(Codebook::new(VqVariant::MultiStage { stages: 2 }, 8, 4, 0.25, 4).unwrap()),
        head: Some(
            RetrievalHead::new(
                HeadConfig {
                    text_dim: 6,
                    frame_dim: 5,
                    shared_dim: 3,
                },
                4,
            )
            .unwrap(),
        ),
        rerank: None,
        extra: [("train.lambda_vq".to_string(), "1".to_string())].into(),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tvsc");
    let b = bundle();
    b.save(&path).unwrap();
    let back = Bundle::load(&path).unwrap();
    assert_eq!(back.orderer.as_ref().unwrap().params, b.orderer.as_ref().unwrap().params);
    assert_eq!(back.orderer.as_ref().unwrap().config, b.orderer.as_ref().unwrap().config);
    assert_eq!(back.codebook, b.codebook);
    assert_eq!(back.head.as_ref().unwrap().params, b.head.as_ref().unwrap().params);
    assert_eq!(back.extra, b.extra);
    assert_eq!(back.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
}

#[test]
fn checkpoint_rejects_bad_magic_and_version() {
    let mut bytes = bundle().to_checkpoint().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
    bytes[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
}

#[test]
fn checkpoint_refuses_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tvsc");
    let b = bundle();
    b.save(&path).unwrap();
    let mut expected = b.config();
    assert!(Bundle::load_expecting(&path, &expected).is_ok());
    expected.insert("orderer.model_dim".into(), "16".into());
    let err = Bundle::load_expecting(&path, &expected).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { ref key, .. } if key == "orderer.model_dim"));
    expected = b.config();
    expected.insert("train.lambda_vq".into(), "10".into());
    assert!(Bundle::load_expecting(&path, &expected).is_err());
}
