mod common;

use jcas::model::{
    forward, objective, objective_with, train_step, warmup_and_estimate_n, Arch, NtmContext, Sgd, TrainData, Weights,
};
use jcas::noise::class_distribution;
use jcas::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_splits(train: usize, test: usize, seed: u64) -> (ShapesConfig, Splits<f64>) {
    let cfg = ShapesConfig {
        height: 16,
        width: 16,
        min_extent: 3,
        max_extent: 5,
        min_visible: 6,
        train,
        test,
        seed,
        ..Default::default()
    };
    let splits = gen_shapes(&cfg).unwrap();
    (cfg, splits)
}

fn small_arch() -> Arch {
    Arch {
        hidden: 6,
        features: 6,
        stride: 2,
    }
}

#[test]
fn zero_model_predicts_uniform() {
    let p = ModelParams::<f64>::zeros(3, 4, Arch::default()).unwrap();
    let (_, q) = forward(&p, &vec![0.0; 8 * 8 * 3], 8, 8).unwrap();
    assert!(q.data().iter().all(|&v| v == 0.25));
}

#[test]
fn forward_is_deterministic_and_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image: Vec<f32> = (0..12 * 10 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let a = ModelParams::<f32>::init(3, 5, Arch::default(), 2.0, 9).unwrap();
    let b = ModelParams::<f32>::init(3, 5, Arch::default(), 2.0, 9).unwrap();
    let (fa, qa) = forward(&a, &image, 12, 10).unwrap();
    let (fb, qb) = forward(&b, &image, 12, 10).unwrap();
    assert_eq!(qa.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), qb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(fa, fb);
    assert_eq!((qa.height(), qa.width(), qa.classes()), (6, 5, 5));
    for k in 0..qa.pixels() {
        let px = qa.pixel(k);
        assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn baseline_step_leaves_ntms_alone() {
    let (_, splits) = small_splits(2, 1, 3);
    let cfg = TrainConfig {
        mode: Mode::BaselineCe,
        ..Default::default()
    };
    let mut p = ModelParams::<f64>::init(3, 4, Arch::default(), 2.0, 5).unwrap();
    let before = p.clone();
    let mut opt = Sgd::new(&p, &cfg);
    let batch: Vec<(&[f64], &LabelMap)> = splits.train.iter().map(|s| (&s.image[..], &s.label)).collect();
    train_step(&mut p, &mut opt, &batch, Mode::BaselineCe, None, Weights::from_config(&cfg)).unwrap();
    assert_eq!(p.ntm_c, before.ntm_c);
    assert_eq!(p.ntm_a, before.ntm_a);
    assert_ne!(p.cls_w, before.cls_w);
}

#[test]
fn jcas_with_identity_ntms_matches_dar() {
    let (_, splits) = small_splits(3, 1, 4);
    let p = ModelParams::<f64>::init(3, 4, small_arch(), 2.0, 6).unwrap();
    let t_c = ClassNtm::identity(4);
    let t_a = AffinityNtm::identity();
    let n = ClassDistribution::uniform(4);
    let ctx = NtmContext {
        t_c: &t_c,
        t_a: &t_a,
        n: &n,
    };
    let w = Weights {
        lambda: 0.0,
        volume: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in &splits.train {
        let noisy = corrupt(&s.label, 4, &NoiseSpec::Symmetric { rate: 0.5 }, rng.random()).unwrap();
        let (lj, gj) = objective_with(&p, &s.image, &noisy, Mode::Jcas, Some(ctx), w).unwrap();
        let (ld, gd) = objective_with(&p, &s.image, &noisy, Mode::Dar, None, w).unwrap();
        assert!((lj.total - ld.total).abs() < 1e-12, "{lj:?} vs {ld:?}");
        let (a, b) = (gj.params.to_flat(), gd.params.to_flat());
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err <= 1e-12 * scale.max(1.0), "max gradient difference {err}");
    }
}

#[test]
fn one_pixel_step_matches_hand_gradient() {
    // Zero weights and a negative feature bias: relu(f) = 0, so the logits are
    // the classifier bias, and the single-pixel affinity is constant. Only the
    // class loss reaches the bias and T_C.
    let mut p = ModelParams::<f64>::zeros(1, 2, small_arch()).unwrap();
    p.conv2_b = vec![-1.0; 6];
    p.cls_b = vec![0.3, -0.2];
    p.ntm_c = NtmParams::new(2, vec![2.0, 0.0, 0.5, 1.0]).unwrap();
    p.ntm_a = NtmParams::scaled_identity(2, 2.0);
    let cfg = TrainConfig {
        mode: Mode::Calc,
        lr: 0.1,
        ntm_lr: 0.05,
        lambda: 0.0,
        volume_weight: 0.0,
        grad_clip: 0.0,
        ..Default::default()
    };
    let noisy = LabelMap::new(1, 1, vec![0]).unwrap();
    let image = [0.7];

    let e = |x: f64| x.exp();
    let q = [e(0.3) / (e(0.3) + e(-0.2)), e(-0.2) / (e(0.3) + e(-0.2))];
    let t = [e(2.0) / (e(2.0) + 1.0), e(0.5) / (e(0.5) + e(1.0))];
    let s = q[0] * t[0] + q[1] * t[1];
    let loss = -s.ln();
    let g_b = [-q[0] * (t[0] - s) / s, -q[1] * (t[1] - s) / s];
    // dL/dT(m, 0) = -Q_m / s through the row softmax: T(m,0) T(m,1) * (g0 - g1).
    let g_raw = |m: usize| {
        let d = -q[m] / s * t[m] * (1.0 - t[m]);
        [d, -d]
    };

    let n = ClassDistribution::uniform(2);
    let (parts, grads) = objective(&p, &image, &noisy, Mode::Calc, Some(&n), Weights::from_config(&cfg)).unwrap();
    assert!((parts.class - loss).abs() < 1e-14);
    for j in 0..2 {
        assert!((grads.cls_b[j] - g_b[j]).abs() < 1e-14);
    }
    let gr = grads.ntm_c.raw();
    for m in 0..2 {
        assert!((gr[2 * m] - g_raw(m)[0]).abs() < 1e-14 && (gr[2 * m + 1] - g_raw(m)[1]).abs() < 1e-14);
    }

    let before = p.clone();
    let mut opt = Sgd::new(&p, &cfg);
    train_step(&mut p, &mut opt, &[(&image[..], &noisy)], Mode::Calc, Some(&n), Weights::from_config(&cfg)).unwrap();
    for j in 0..2 {
        assert!((p.cls_b[j] - (before.cls_b[j] - 0.1 * g_b[j])).abs() < 1e-14);
    }
    for m in 0..2 {
        let want = before.ntm_c.raw()[2 * m] - 0.05 * g_raw(m)[0];
        assert!((p.ntm_c.raw()[2 * m] - want).abs() < 1e-14);
    }
    assert_eq!(p.conv1_w, before.conv1_w);
}

#[test]
fn warmup_needs_an_epoch() {
    let (_, splits) = small_splits(2, 1, 5);
    let noisy: Vec<LabelMap> = splits.train.iter().map(|s| s.label.clone()).collect();
    let data = TrainData::new(&splits, &noisy, 4).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 0,
        ..Default::default()
    };
    let mut p = ModelParams::<f64>::init(3, 4, Arch::default(), 2.0, 0).unwrap();
    assert!(matches!(warmup_and_estimate_n(&data, &mut p, &cfg), Err(Error::Config(_))));
    assert!(matches!(train(&data, &cfg), Err(Error::Config(_))));
}

#[test]
fn warmup_on_clean_labels_recovers_the_class_distribution() {
    let cfg = ShapesConfig {
        train: 100,
        test: 1,
        ..Default::default()
    };
    let splits = gen_shapes::<f32>(&cfg).unwrap();
    let clean: Vec<LabelMap> = splits.train.iter().map(|s| s.label.clone()).collect();
    let data = TrainData::new(&splits, &clean, 4).unwrap();
    let tc = TrainConfig {
        mode: Mode::Calc,
        warmup_epochs: 8,
        ..Default::default()
    };
    let mut p = ModelParams::<f32>::init(3, 4, tc.arch, tc.ntm_init, 1).unwrap();
    let n = warmup_and_estimate_n(&data, &mut p, &tc).unwrap();
    let truth = class_distribution::<f64>(&clean, 4).unwrap();
    let sum: f32 = n.proportions().iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
    for (a, b) in n.proportions().iter().zip(truth.proportions()) {
        assert!((*a as f64 - b).abs() < 0.05, "{:?} vs {:?}", n.proportions(), truth.proportions());
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let (_, splits) = small_splits(2, 1, 6);
    let noisy: Vec<LabelMap> = splits.train.iter().map(|s| s.label.clone()).collect();
    let data = TrainData::new(&splits, &noisy, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let (p, h) = train(&data, &cfg).unwrap();
    assert!(h.is_empty());
    assert_eq!(p, ModelParams::init(3, 4, cfg.arch, cfg.ntm_init, jcas::seed::derive_seed(cfg.seed, 0)).unwrap());
}

#[test]
fn training_is_deterministic_for_every_mode() {
    let (_, splits) = small_splits(6, 2, 7);
    let noisy: Vec<LabelMap> = splits
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt(&s.label, 4, &NoiseSpec::Symmetric { rate: 0.5 }, i as u64).unwrap())
        .collect();
    let data = TrainData::new(&splits, &noisy, 4).unwrap();
    for mode in Mode::ALL {
        let cfg = TrainConfig {
            mode,
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 2,
            arch: small_arch(),
            seed: 11,
            ..Default::default()
        };
        let (pa, ha) = train(&data, &cfg).unwrap();
        let (pb, hb) = train(&data, &cfg).unwrap();
        assert_eq!(ha, hb, "{}", mode.name());
        assert_eq!(pa, pb);
        assert_eq!(ha.len(), 3);
        assert_eq!(ha.class_distribution.is_some(), mode.corrected());
        assert_eq!(ha.epochs.iter().filter(|r| r.warmup).count(), usize::from(mode.corrected()));
        assert_eq!(ha.metrics_csv(4), hb.metrics_csv(4));
    }
}

#[test]
fn corrected_objectives_need_a_class_distribution() {
    let (_, splits) = small_splits(1, 1, 8);
    let p = ModelParams::<f64>::init(3, 4, small_arch(), 2.0, 0).unwrap();
    let s = &splits.train[0];
    let w = Weights {
        lambda: 0.01,
        volume: 0.0,
    };
    for mode in [Mode::Calc, Mode::Jcas] {
        assert!(matches!(objective(&p, &s.image, &s.label, mode, None, w), Err(Error::Config(_))));
    }
}

fn moving_average(xs: &[f64], k: usize) -> Vec<f64> {
    xs.windows(k).map(|w| w.iter().sum::<f64>() / k as f64).collect()
}

#[test]
fn clean_label_training_keeps_ntms_diagonal_and_loss_trending_down() {
    let cfg = ShapesConfig {
        train: 60,
        test: 10,
        ..Default::default()
    };
    let splits = gen_shapes::<f32>(&cfg).unwrap();
    let clean: Vec<LabelMap> = splits.train.iter().map(|s| s.label.clone()).collect();
    let data = TrainData::new(&splits, &clean, 4).unwrap();
    let tc = TrainConfig {
        mode: Mode::Calc,
        epochs: 20,
        warmup_epochs: 5,
        ..Default::default()
    };
    let (p, h) = train(&data, &tc).unwrap();
    let t_c = p.class_ntm().unwrap();
    for m in 0..4 {
        let row = t_c.row(m);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let best = (0..4).fold(0, |b, n| if row[n] > row[b] { n } else { b });
        assert_eq!(best, m, "row {m} of T_C: {row:?}");
    }
    let t_a = p.affinity_ntm().unwrap();
    assert!(t_a.get(0, 0) > t_a.get(0, 1) && t_a.get(1, 1) > t_a.get(1, 0), "{:?}", t_a.data());

    let corrected: Vec<f64> = h.epochs.iter().filter(|r| !r.warmup).map(|r| r.loss.total).collect();
    let avg = moving_average(&corrected, 5);
    assert!(avg.windows(2).all(|w| w[1] <= w[0]), "{avg:?}");
}

#[test]
fn baseline_loss_trends_down_on_noisy_labels() {
    let cfg = ShapesConfig {
        train: 60,
        test: 10,
        ..Default::default()
    };
    let splits = gen_shapes::<f32>(&cfg).unwrap();
    let noisy: Vec<LabelMap> = splits
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt(&s.label, 4, &NoiseSpec::default(), i as u64).unwrap())
        .collect();
    let data = TrainData::new(&splits, &noisy, 4).unwrap();
    let tc = TrainConfig {
        mode: Mode::BaselineCe,
        epochs: 20,
        ..Default::default()
    };
    let (_, h) = train(&data, &tc).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|r| r.loss.total).collect();
    let avg = moving_average(&losses, 5);
    assert!(avg.windows(2).all(|w| w[1] <= w[0]), "{avg:?}");
}
