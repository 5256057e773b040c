use oneshot_core::data::{generate_synthetic_anodes, Dataset, DatasetMeta, SyntheticAnodeSpec};
use oneshot_core::experiment::{crossvalidate, fold_split, run_fold, summarize, Experiment, PairPlan, Protocol};
use oneshot_core::image::Image;
use oneshot_core::model::{Approach, Model, ModelOptions, ModelSpec};
use oneshot_core::pairing::{sample_pairs, PairSample};
use oneshot_core::seed;
use oneshot_core::trainer::{
    evaluate_pairs, pair_accuracy, rmsprop_step, score_pairs, train, train_reconstruction, Decision, LossKind,
    TrainConfig,
};
use oneshot_core::{Error, Tape};
use proptest::prelude::*;
use rand::Rng;

fn meta() -> DatasetMeta {
    DatasetMeta {
        source: "test".into(),
        synthetic: true,
    }
}

/// Classes are distinct 6x6 stripe patterns plus a little per-view noise.
fn toy_dataset(classes: usize, views: usize, s: u64) -> Dataset {
    let mut rng = seed::rng(s);
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for c in 0..classes {
        for _ in 0..views {
            let data = (0..36)
                .map(|p| {
                    let (y, x) = (p / 6, p % 6);
                    let base = if (x + y * (c % 3) + c / 3) % (2 + c % 2) == 0 { 0.8 } else { 0.2 };
                    base + rng.random_range(-0.05..0.05f32)
                })
                .collect();
            images.push(Image::gray(6, 6, data).unwrap());
            ids.push(c);
        }
    }
    let n = images.len();
    Dataset::new(images, ids, (0..n).map(|i| format!("toy/{i}")).collect(), meta()).unwrap()
}

fn small_options() -> ModelOptions {
    ModelOptions {
        conv_filters: Some(vec![4]),
        pool_after: Some(vec![]),
        dense: Some(vec![16, 2]),
        ..Default::default()
    }
}

fn siamese_options() -> ModelOptions {
    ModelOptions {
        conv_filters: Some(vec![3]),
        pool_after: Some(vec![]),
        dense: Some(vec![8, 4]),
        ..Default::default()
    }
}

fn tiny_caps_options() -> ModelOptions {
    ModelOptions {
        conv1_channels: Some(4),
        conv1_kernel: Some(3),
        feature_maps: Some(4),
        conv2_kernel: Some(3),
        conv2_stride: Some(1),
        primary_dim: Some(2),
        capsules: Some(3),
        capsule_dim: Some(4),
        decoder_hidden: Some(vec![12]),
        ..Default::default()
    }
}

fn model(approach: Approach, opts: &ModelOptions, ds: &Dataset, s: u64) -> Model {
    Model::build(ModelSpec::new(approach, ds.image_shape().unwrap(), opts), s).unwrap()
}

#[test]
fn rmsprop_scripted_step() {
    let mut p = [0.0];
    let mut s = [0.0];
    rmsprop_step(&mut p, &[1.0], &mut s, 0.01, 0.9, 1e-8).unwrap();
    assert!((s[0] - 0.1).abs() < 1e-15);
    assert!((p[0] + 0.01 / (0.1f64.sqrt() + 1e-8)).abs() < 1e-16);

    let mut q = [1.5, -2.0];
    let mut st = [0.3, 0.0];
    rmsprop_step(&mut q, &[0.0, 0.0], &mut st, 0.5, 0.9, 1e-8).unwrap();
    assert_eq!(q, [1.5, -2.0]);
}

#[test]
fn rmsprop_descends_a_parabola() {
    let mut p = [5.0];
    let mut s = [0.0];
    let mut prev = 5.0f64;
    for _ in 0..100 {
        let g = [2.0 * p[0]];
        rmsprop_step(&mut p, &g, &mut s, 0.01, 0.9, 1e-8).unwrap();
        assert!(p[0].abs() < prev);
        prev = p[0].abs();
    }
}

#[test]
fn frozen_optimizer_keeps_parameters() {
    let ds = toy_dataset(4, 4, 1);
    let pairs = sample_pairs(&ds, 64, 0.5, 2).unwrap();
    let val = sample_pairs(&ds, 16, 0.5, 3).unwrap();
    let mut m = model(Approach::Merged, &small_options(), &ds, 4);
    let before = m.store().clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 16,
        epochs: 4,
        early_stopping: false,
        ..Default::default()
    };
    let rep = train(&mut m, &ds, &pairs, &val, LossKind::CrossEntropy, &cfg).unwrap();
    assert_eq!(m.store(), &before);
    assert_eq!(rep.epochs.len(), 4);
    assert!(rep.epochs.iter().all(|e| e.train_acc == rep.epochs[0].train_acc));
    assert!(rep.epochs.iter().all(|e| e.val_acc == rep.epochs[0].val_acc));
}

#[test]
fn separable_pairs_are_learned() {
    let ds = toy_dataset(6, 6, 5);
    let pairs = sample_pairs(&ds, 240, 0.5, 6).unwrap();
    let mut m = model(Approach::SiameseCnn, &siamese_options(), &ds, 7);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        early_stopping: false,
        ..Default::default()
    };
    let rep = train(&mut m, &ds, &pairs, &[], LossKind::Contrastive, &cfg).unwrap();
    let best = rep.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.99, "best training accuracy {best}");
    assert!(evaluate_pairs(&m, &ds, &pairs).unwrap() >= 0.99);
}

#[test]
fn training_is_deterministic() {
    let ds = toy_dataset(4, 4, 8);
    let pairs = sample_pairs(&ds, 50, 0.5, 9).unwrap();
    let val = sample_pairs(&ds, 20, 0.5, 10).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 3,
        seed: 11,
        ..Default::default()
    };
    let run = || {
        let mut m = model(Approach::SiameseCnn, &siamese_options(), &ds, 12);
        let r = train(&mut m, &ds, &pairs, &val, LossKind::Contrastive, &cfg).unwrap();
        (r, m.store().clone())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.without_timing(), b.without_timing());
    assert_eq!(a.epochs_csv(), b.epochs_csv());
    assert_eq!(sa, sb);
    assert!(a.threshold.is_some());
}

#[test]
fn early_stopping_waits_for_patience() {
    let ds = toy_dataset(3, 4, 13);
    let pairs = sample_pairs(&ds, 32, 0.5, 14).unwrap();
    let val = sample_pairs(&ds, 8, 0.5, 15).unwrap();
    for patience in 1..4 {
        let mut m = model(Approach::Merged, &small_options(), &ds, 16);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 8,
            epochs: 20,
            patience,
            ..Default::default()
        };
        let rep = train(&mut m, &ds, &pairs, &val, LossKind::CrossEntropy, &cfg).unwrap();
        // a constant validation loss never improves after the first epoch
        assert_eq!(rep.epochs.len(), patience + 1);
        assert!(rep.stopped_early);
        assert_eq!(rep.best_epoch, 1);
    }
}

#[test]
fn restore_best_reloads_parameters() {
    let ds = toy_dataset(4, 4, 17);
    let pairs = sample_pairs(&ds, 64, 0.5, 18).unwrap();
    let val = sample_pairs(&ds, 16, 0.5, 19).unwrap();
    let mut m = model(Approach::Merged, &small_options(), &ds, 20);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        epochs: 8,
        early_stopping: false,
        min_delta: 0.0,
        ..Default::default()
    };
    let rep = train(&mut m, &ds, &pairs, &val, LossKind::CrossEntropy, &cfg).unwrap();
    let best = rep
        .epochs
        .iter()
        .min_by(|a, b| a.val_loss.unwrap().total_cmp(&b.val_loss.unwrap()))
        .unwrap();
    let (loss, _) = oneshot_core::trainer::evaluate_loss(&m, &ds, &val, &cfg).unwrap();
    assert!((loss - best.val_loss.unwrap()).abs() < 1e-12);
}

#[test]
fn train_contract_errors() {
    let ds = toy_dataset(3, 3, 21);
    let pairs = sample_pairs(&ds, 12, 0.5, 22).unwrap();
    let mut m = model(Approach::Merged, &small_options(), &ds, 23);
    let cfg = TrainConfig::default();
    assert!(matches!(
        train(&mut m, &ds, &pairs, &[], LossKind::Contrastive, &cfg),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train(&mut m, &ds, &[], &[], LossKind::CrossEntropy, &cfg),
        Err(Error::Data(_))
    ));
    let mut s = model(Approach::SiameseCnn, &siamese_options(), &ds, 23);
    assert!(matches!(
        train(&mut s, &ds, &pairs, &[], LossKind::CrossEntropy, &cfg),
        Err(Error::Config(_))
    ));
    assert!(matches!(evaluate_pairs(&m, &ds, &[]), Err(Error::Data(_))));
    // untrained siamese models have no threshold yet
    assert!(matches!(evaluate_pairs(&s, &ds, &pairs), Err(Error::State(_))));
}

#[test]
fn nan_input_reports_epoch_and_batch() {
    let mut ds = toy_dataset(3, 3, 24);
    let mut imgs: Vec<Image> = ds.images().to_vec();
    imgs[0].data_mut()[0] = f32::NAN;
    ds = Dataset::new(imgs, ds.class_ids().to_vec(), (0..9).map(|i| i.to_string()).collect(), meta()).unwrap();
    let pairs: Vec<PairSample> = (0..8).map(|i| PairSample { a: 0, b: i + 1, label: u8::from(i < 2) }).collect();
    let mut m = model(Approach::Merged, &small_options(), &ds, 25);
    let err = train(&mut m, &ds, &pairs, &[], LossKind::CrossEntropy, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(err.to_string().contains("epoch 1, batch 1"), "{err}");
}

#[test]
fn shared_towers_stay_identical() {
    let ds = toy_dataset(3, 3, 26);
    let pairs = sample_pairs(&ds, 16, 0.5, 27).unwrap();
    let mut m = model(Approach::SiameseCnn, &siamese_options(), &ds, 28);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    train(&mut m, &ds, &pairs, &[], LossKind::Contrastive, &cfg).unwrap();
    // an image compared with itself embeds identically on both sides
    let same: Vec<PairSample> = (0..ds.len()).map(|i| PairSample { a: i, b: i, label: 1 }).collect();
    assert!(score_pairs(&m, &ds, &same).unwrap().iter().all(|&d| d == 0.0));
    let mut tape = Tape::new();
    m.forward_pairs(&mut tape, &ds, &pairs).unwrap();
    // one parameter set serves both towers
    assert_eq!(m.store().len(), 6);
}

#[test]
fn decision_examples() {
    let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
    let constant = vec![-1.0; 20];
    assert_eq!(pair_accuracy(&constant, &labels, Decision::Argmax).unwrap(), 0.5);
    let oracle: Vec<f64> = labels.iter().map(|&l| if l == 1 { 0.0 } else { 10.0 }).collect();
    assert_eq!(pair_accuracy(&oracle, &labels, Decision::Threshold(5.0)).unwrap(), 1.0);
    assert!(matches!(pair_accuracy(&[], &[], Decision::Argmax), Err(Error::Data(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(3, 3, 29);
    let pairs = sample_pairs(&ds, 12, 0.5, 30).unwrap();
    for (approach, opts) in [
        (Approach::Merged, small_options()),
        (Approach::SiameseCnn, siamese_options()),
        (Approach::SiameseCapsnet, tiny_caps_options()),
    ] {
        let mut m = model(approach, &opts, &ds, 31);
        m.set_threshold(Some(0.75));
        if let Some(c) = m.capsnet_mut() {
            c.set_reconstruction_loss(Some(0.01));
        }
        let path = dir.path().join(format!("{approach}.ckpt"));
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.store(), m.store());
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.threshold(), Some(0.75));
        assert_eq!(score_pairs(&back, &ds, &pairs).unwrap(), score_pairs(&m, &ds, &pairs).unwrap());
        if let Some(c) = back.capsnet() {
            assert_eq!(c.reconstruction_loss(), Some(0.01));
        }

        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Model::from_bytes(&extra), Err(Error::Format(_))));
    }
}

#[test]
fn report_files() {
    let ds = toy_dataset(3, 3, 32);
    let pairs = sample_pairs(&ds, 12, 0.5, 33).unwrap();
    let mut m = model(Approach::Merged, &small_options(), &ds, 34);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 5,
        early_stopping: false,
        ..Default::default()
    };
    let rep = train(&mut m, &ds, &pairs, &pairs, LossKind::CrossEntropy, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rep.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,val_loss,val_acc"));
    assert_eq!(lines.count(), 3);
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.lines().all(|l| l.contains(" = ")));
    assert!(text.contains("config.batch_size = 5"));
    for e in &rep.epochs {
        assert!((0.0..=1.0).contains(&e.train_acc));
        assert!((0.0..=1.0).contains(&e.val_acc.unwrap()));
    }
}

#[test]
fn reconstruction_training_records_error() {
    let ds = toy_dataset(3, 2, 35);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut m = model(Approach::SiameseCapsnet, &tiny_caps_options(), &ds, 36);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 15,
        batch_size: 6,
        ..Default::default()
    };
    let rep = train_reconstruction(&mut m, &ds, &idx, &cfg).unwrap();
    let first = rep.epochs[0].train_loss;
    let last = rep.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let recorded = m.capsnet().unwrap().reconstruction_loss().unwrap();
    assert!(recorded.is_finite() && recorded < first);

    let mut merged = model(Approach::Merged, &small_options(), &ds, 36);
    assert!(matches!(train_reconstruction(&mut merged, &ds, &idx, &cfg), Err(Error::Config(_))));
}

fn small_experiment(protocol: Protocol) -> Experiment {
    Experiment {
        approach: Approach::Merged,
        model: small_options(),
        train: TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 2,
            ..Default::default()
        },
        pairs: PairPlan {
            train: 48,
            val: 16,
            test: 20,
            ..Default::default()
        },
        protocol,
        augment: None,
        generate: None,
        seed: 37,
    }
}

#[test]
fn fold_splits() {
    let ds = toy_dataset(8, 5, 38);
    let exp = small_experiment(Protocol::Kfold { k: 5 });
    let mut tested = vec![0; ds.len()];
    for f in 0..5 {
        let s = fold_split(&exp, &ds, f).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.len());
        assert!(s.test.iter().all(|i| !s.train.contains(i) && !s.val.contains(i)));
        for &i in &s.test {
            tested[i] += 1;
        }
    }
    assert!(tested.iter().all(|&t| t == 1));
    assert!(matches!(
        fold_split(&small_experiment(Protocol::Kfold { k: 6 }), &ds, 0),
        Err(Error::Config(_))
    ));

    let exp = small_experiment(Protocol::Holdout { classes: 2, folds: 3 });
    let s = fold_split(&exp, &ds, 1).unwrap();
    let class = |i: &usize| ds.class_ids()[*i];
    assert!(s.test.iter().all(|i| !s.train.iter().map(class).any(|c| c == class(i))));
    assert!(s.val.iter().all(|i| !s.train.iter().map(class).any(|c| c == class(i))));
    assert_eq!(s.test.iter().map(class).collect::<std::collections::BTreeSet<_>>().len(), 2);
}

#[test]
fn crossvalidation_contract() {
    let ds = toy_dataset(6, 4, 39);
    let exp = small_experiment(Protocol::Kfold { k: 3 });
    let cv = crossvalidate(&exp, &ds, 1).unwrap();
    assert_eq!(cv.folds.len(), 3);
    let accs: Vec<f64> = cv.folds.iter().map(|f| f.report.test_accuracy.unwrap()).collect();
    assert!((cv.mean - accs.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(summarize(&accs), (cv.mean, cv.std));

    // fold results do not depend on order or parallelism
    let alone = run_fold(&exp, &ds, 2).unwrap();
    assert_eq!(alone.report.without_timing(), cv.folds[2].report.without_timing());
    let par = crossvalidate(&exp, &ds, 2).unwrap();
    for (a, b) in par.folds.iter().zip(&cv.folds) {
        assert_eq!(a.report.without_timing(), b.report.without_timing());
    }

    let thin = toy_dataset(6, 3, 39);
    let err = crossvalidate(&exp, &thin, 1).unwrap_err();
    assert!(err.to_string().contains("no class two training images"), "{err}");

    let bad = small_experiment(Protocol::Kfold { k: 5 });
    let err = crossvalidate(&bad, &ds, 1).unwrap_err();
    assert!(err.to_string().contains("exceeds the smallest class size"), "{err}");
}

#[test]
fn holdout_run_with_augmentation() {
    let spec = SyntheticAnodeSpec {
        height: 10,
        width: 10,
        stub_radius_min: 0.8,
        stub_radius_max: 1.2,
        ..Default::default()
    };
    let ds = generate_synthetic_anodes(&spec, 8, 3).unwrap();
    let mut exp = small_experiment(Protocol::Holdout { classes: 2, folds: 1 });
    exp.augment = Some(oneshot_core::experiment::AugmentPlan {
        copies: 1,
        config: Default::default(),
    });
    let out = run_fold(&exp, &ds, 0).unwrap();
    let acc = out.report.test_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.report.notes.iter().any(|n| n.starts_with("augmented images = ")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn accuracy_ignores_pair_order(
        scores in prop::collection::vec(0.0f64..4.0, 1..40),
        s in 0u64..1000,
        tau in 0.0f64..4.0,
    ) {
        let labels: Vec<u8> = scores.iter().enumerate().map(|(i, _)| ((i as u64 + s) % 2) as u8).collect();
        let a = pair_accuracy(&scores, &labels, Decision::Threshold(tau)).unwrap();
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut seed::rng(s));
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let pl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(a, pair_accuracy(&ps, &pl, Decision::Threshold(tau)).unwrap());
        let t = oneshot_core::trainer::sweep_threshold(&scores, &labels).unwrap();
        let best = pair_accuracy(&scores, &labels, Decision::Threshold(t)).unwrap();
        prop_assert!(best >= a);
    }
}
