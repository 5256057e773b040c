//! Evaluation protocols, fold splits and cross-validation of pair models.
//!
//! Every random choice in a fold derives from the experiment seed:
//! `fold_seed = derive(seed, "fold", f)`, then init, shuffling, pairs and
//! augmentation each take their own tag under `fold_seed`. Image-level fold
//! assignment uses the experiment seed itself so folds partition the data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::capsules::{generate_images, GenerateConfig};
use crate::data::{fold_sizes, kfold_split, Dataset};
use crate::error::{Error, Result};
use crate::model::{Approach, Model, ModelOptions, ModelSpec};
use crate::pairing::{holdout_split, sample_pairs_within, sample_query_pairs, PairSample};
use crate::seed;
use crate::trainer::{evaluate_pairs, train, train_reconstruction, LossKind, RunReport, TrainConfig};

/// How images are split into training, validation and test parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    /// Image-level stratified folds. Fold `f` is the test part, fold `f+1`
    /// the validation part (for `k >= 3`), the rest trains. Test and
    /// validation pairs put a held-out image first and a training image second.
    Kfold { k: usize },
    /// Zero-shot: `classes` unseen classes are tested per fold, another
    /// `classes` validate, the rest train. Each fold redraws the classes.
    Holdout { classes: usize, folds: usize },
}

impl Protocol {
    pub fn folds(&self) -> usize {
        match self {
            Protocol::Kfold { k } => *k,
            Protocol::Holdout { folds, .. } => *folds,
        }
    }

    /// Fails unless the protocol can split `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let groups = ds.by_class();
        match *self {
            Protocol::Kfold { k } => {
                let smallest = groups.values().map(Vec::len).min().unwrap_or(0);
                if k < 2 {
                    return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
                }
                if k > smallest {
                    return Err(Error::Config(format!(
                        "k = {k} exceeds the smallest class size {smallest}"
                    )));
                }
                if groups.len() < 2 {
                    return Err(Error::Config("k-fold pairs need at least two classes".into()));
                }
                // fold f tests on fold f and, for k >= 3, validates on fold f + 1
                let sizes = fold_sizes(ds, k);
                for f in 0..k {
                    let kept = |s: &Vec<usize>| {
                        let held = s[f] + if k >= 3 { s[(f + 1) % k] } else { 0 };
                        s.iter().sum::<usize>() - held
                    };
                    if !sizes.iter().any(|s| kept(s) >= 2) {
                        return Err(Error::Config(format!(
                            "with k = {k}, fold {f} leaves no class two training images for same pairs"
                        )));
                    }
                }
            }
            Protocol::Holdout { classes, folds } => {
                if folds == 0 {
                    return Err(Error::Config("holdout needs at least one fold".into()));
                }
                if classes < 2 {
                    return Err(Error::Config(format!("holdout needs at least 2 test classes, got {classes}")));
                }
                if classes + 2 > groups.len() {
                    return Err(Error::Config(format!(
                        "holding out {classes} classes leaves fewer than 2 of {} to train on",
                        groups.len()
                    )));
                }
                if groups.values().any(|g| g.len() < 2) {
                    return Err(Error::Config("holdout needs at least 2 images per class".into()));
                }
            }
        }
        Ok(())
    }
}

/// Pair counts drawn per fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of same-class pairs.
    pub balance: f64,
    /// Also train on every pair in swapped order.
    pub swap: bool,
}

impl Default for PairPlan {
    fn default() -> Self {
        PairPlan {
            train: 2000,
            val: 400,
            test: 400,
            balance: 0.5,
            swap: false,
        }
    }
}

/// Augmented copies added per training image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub copies: usize,
    pub config: AugmentConfig,
}

/// Decoder-generated images added per training image (capsule models).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratePlan {
    pub per_image: usize,
    pub noise_scale: f64,
    pub loss_threshold: f64,
    /// Epochs of reconstruction-only training before generating.
    pub recon_epochs: usize,
    pub recon_learning_rate: f64,
}

impl Default for GeneratePlan {
    fn default() -> Self {
        GeneratePlan {
            per_image: 1,
            noise_scale: 0.05,
            loss_threshold: 0.02,
            recon_epochs: 10,
            recon_learning_rate: 1e-3,
        }
    }
}

/// Everything needed to run one protocol on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub approach: Approach,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub pairs: PairPlan,
    pub protocol: Protocol,
    pub augment: Option<AugmentPlan>,
    pub generate: Option<GeneratePlan>,
    pub seed: u64,
}

impl Experiment {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.train.validate()?;
        self.protocol.validate(ds)?;
        if !(0.0..=1.0).contains(&self.pairs.balance) {
            return Err(Error::Config(format!("pair balance {} outside [0, 1]", self.pairs.balance)));
        }
        if self.pairs.train == 0 || self.pairs.test == 0 {
            return Err(Error::Config("train and test pair counts must be positive".into()));
        }
        if let Some(a) = &self.augment {
            a.config.validate()?;
        }
        if self.generate.is_some() && self.approach != Approach::SiameseCapsnet {
            return Err(Error::Config("decoder generation needs the siamese-capsnet approach".into()));
        }
        let shape = ds
            .image_shape()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let spec = ModelSpec::new(self.approach, shape, &self.model);
        if let ModelSpec::SiameseCapsnet { caps } = &spec {
            caps.validate()?;
        }
        Model::build(spec, 0).map(|_| ())
    }

    pub fn fold_seed(&self, fold: usize) -> u64 {
        seed::derive(self.seed, "fold", fold as u64)
    }
}

/// Image indices of one fold. Query-style folds pair held-out images
/// against training images.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub query: bool,
}

pub fn fold_split(exp: &Experiment, ds: &Dataset, fold: usize) -> Result<FoldSplit> {
    exp.protocol.validate(ds)?;
    let n_folds = exp.protocol.folds();
    if fold >= n_folds {
        return Err(Error::Config(format!("fold {fold} outside 0..{n_folds}")));
    }
    match exp.protocol {
        Protocol::Kfold { k } => {
            let (_, test) = kfold_split(ds, k, fold, exp.seed)?;
            let val = if k >= 3 {
                kfold_split(ds, k, (fold + 1) % k, exp.seed)?.1
            } else {
                Vec::new()
            };
            let train = (0..ds.len())
                .filter(|i| test.binary_search(i).is_err() && val.binary_search(i).is_err())
                .collect();
            Ok(FoldSplit {
                train,
                val,
                test,
                query: true,
            })
        }
        Protocol::Holdout { classes, .. } => {
            let fs = exp.fold_seed(fold);
            let (rest, test_classes) = holdout_split(ds, classes, fs)?;
            let val_classes = if rest.len() >= classes + 2 {
                let mut order = rest.clone();
                order.shuffle(&mut seed::derived_rng(fs, "val-classes", 0));
                let mut v = order[..classes].to_vec();
                v.sort_unstable();
                v
            } else {
                Vec::new()
            };
            let pick = |cs: &[usize]| -> Vec<usize> {
                (0..ds.len()).filter(|&i| cs.binary_search(&ds.class_ids()[i]).is_ok()).collect()
            };
            let train_classes: Vec<usize> = rest.iter().copied().filter(|c| val_classes.binary_search(c).is_err()).collect();
            Ok(FoldSplit {
                train: pick(&train_classes),
                val: pick(&val_classes),
                test: pick(&test_classes),
                query: false,
            })
        }
    }
}

/// Training, validation and test pairs of a fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPairs {
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

pub fn fold_pairs(exp: &Experiment, ds: &Dataset, split: &FoldSplit, fold: usize) -> Result<FoldPairs> {
    let fs = exp.fold_seed(fold);
    let p = &exp.pairs;
    let mut train = sample_pairs_within(ds, &split.train, p.train, p.balance, seed::derive(fs, "train-pairs", 0))?;
    if p.swap {
        train = crate::pairing::with_swapped(&train);
    }
    let val_seed = seed::derive(fs, "val-pairs", 0);
    let test_seed = seed::derive(fs, "test-pairs", 0);
    let (val, test) = if split.query {
        let val = if split.val.is_empty() || p.val == 0 {
            // no held-out validation images: unseen pairs of training images
            sample_pairs_within(ds, &split.train, p.val, p.balance, val_seed)?
        } else {
            sample_query_pairs(ds, &split.val, &split.train, p.val, p.balance, val_seed)?
        };
        let gallery: Vec<usize> = {
            let mut g = split.train.clone();
            g.extend(&split.val);
            g.sort_unstable();
            g
        };
        (val, sample_query_pairs(ds, &split.test, &gallery, p.test, p.balance, test_seed)?)
    } else {
        let val_from = if split.val.is_empty() { &split.train } else { &split.val };
        (
            sample_pairs_within(ds, val_from, p.val, p.balance, val_seed)?,
            sample_pairs_within(ds, &split.test, p.test, p.balance, test_seed)?,
        )
    };
    Ok(FoldPairs { train, val, test })
}

/// Appends `copies` augmented versions of each listed image. Returns the
/// grown dataset and the indices of the new images.
pub fn augment_images(ds: Dataset, indices: &[usize], plan: &AugmentPlan, rng_seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let cfg = AugmentConfig {
        seed: rng_seed,
        ..plan.config.clone()
    };
    let mut images = Vec::new();
    let mut classes = Vec::new();
    let mut origins = Vec::new();
    for (n, &i) in indices.iter().enumerate() {
        for c in 0..plan.copies {
            let (img, _) = augment_pipeline(ds.image(i), &cfg, (n * plan.copies + c) as u64)?;
            images.push(img);
            classes.push(ds.class_ids()[i]);
            origins.push(format!("augmented/{}/{c}", ds.origin(i)));
        }
    }
    append(ds, images, classes, origins)
}

fn append(ds: Dataset, images: Vec<crate::image::Image>, classes: Vec<usize>, origins: Vec<String>) -> Result<(Dataset, Vec<usize>)> {
    let start = ds.len();
    let added = images.len();
    let meta = ds.meta().clone();
    let extra = Dataset::new(images, classes, origins, meta)?;
    Ok((ds.concat(extra)?, (start..start + added).collect()))
}

/// Appends decoder-generated images for each listed image, keeping its class.
pub fn generated_images(
    model: &Model,
    ds: Dataset,
    indices: &[usize],
    per_image: usize,
    cfg: &GenerateConfig,
) -> Result<(Dataset, Vec<usize>)> {
    let net = model
        .capsnet()
        .ok_or_else(|| Error::Config(format!("{} models cannot generate images", model.approach())))?;
    let mut images = Vec::new();
    let mut classes = Vec::new();
    let mut origins = Vec::new();
    for (n, &i) in indices.iter().enumerate() {
        let one = GenerateConfig {
            seed: seed::derive(cfg.seed, "generated-image", n as u64),
            ..cfg.clone()
        };
        for (k, img) in generate_images(net, model.store(), &[ds.image(i).clone()], per_image, &one)?
            .into_iter()
            .enumerate()
        {
            images.push(img);
            classes.push(ds.class_ids()[i]);
            origins.push(format!("generated/{}/{k}", ds.origin(i)));
        }
    }
    append(ds, images, classes, origins)
}

/// A trained fold: its report (with test accuracy) and model.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub report: RunReport,
    pub model: Model,
}

/// Trains and tests one fold.
pub fn run_fold(exp: &Experiment, ds: &Dataset, fold: usize) -> Result<FoldOutcome> {
    run_fold_inner(exp, ds, fold).map_err(|e| e.context(format!("fold {fold}")))
}

fn run_fold_inner(exp: &Experiment, ds: &Dataset, fold: usize) -> Result<FoldOutcome> {
    exp.validate(ds)?;
    let fs = exp.fold_seed(fold);
    let split = fold_split(exp, ds, fold)?;
    let pairs = fold_pairs(exp, ds, &split, fold)?;
    let shape = ds.image_shape().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let mut model = Model::build(ModelSpec::new(exp.approach, shape, &exp.model), fs)?;
    let mut notes = vec![
        format!(
            "images train/val/test = {}/{}/{}",
            split.train.len(),
            split.val.len(),
            split.test.len()
        ),
        format!(
            "pairs train/val/test = {}/{}/{}",
            pairs.train.len(),
            pairs.val.len(),
            pairs.test.len()
        ),
    ];

    // extra training images join as pairs among themselves and the originals
    let mut work = ds.clone();
    let mut extra: Vec<usize> = Vec::new();
    if let Some(plan) = exp.augment.as_ref().filter(|p| p.copies > 0) {
        let (grown, added) = augment_images(work, &split.train, plan, seed::derive(fs, "augment", 0))?;
        notes.push(format!("augmented images = {}", added.len()));
        work = grown;
        extra.extend(added);
    }
    if let Some(plan) = &exp.generate {
        let rcfg = TrainConfig {
            epochs: plan.recon_epochs,
            learning_rate: plan.recon_learning_rate,
            seed: seed::derive(fs, "recon-shuffle", 0),
            ..exp.train.clone()
        };
        let rep = train_reconstruction(&mut model, &work, &split.train, &rcfg)?;
        notes.extend(rep.notes);
        let gcfg = GenerateConfig {
            noise_scale: plan.noise_scale,
            loss_threshold: plan.loss_threshold,
            seed: seed::derive(fs, "generate", 0),
        };
        let (grown, added) = generated_images(&model, work, &split.train, plan.per_image, &gcfg)?;
        notes.push(format!("generated images = {}", added.len()));
        work = grown;
        extra.extend(added);
    }
    let train_pairs = if extra.is_empty() {
        pairs.train.clone()
    } else {
        let mut all = split.train.clone();
        all.extend(&extra);
        let p = &exp.pairs;
        let mut tp = sample_pairs_within(&work, &all, p.train, p.balance, seed::derive(fs, "train-pairs", 1))?;
        if p.swap {
            tp = crate::pairing::with_swapped(&tp);
        }
        tp
    };

    let cfg = TrainConfig {
        seed: seed::derive(fs, "shuffle", 0),
        ..exp.train.clone()
    };
    let mut report = train(
        &mut model,
        &work,
        &train_pairs,
        &pairs.val,
        LossKind::for_approach(exp.approach),
        &cfg,
    )?;
    report.test_accuracy = Some(evaluate_pairs(&model, &work, &pairs.test)?);
    report.seed = exp.seed;
    report.config.insert(0, ("fold".into(), fold.to_string()));
    report.config.insert(1, ("fold_seed".into(), fs.to_string()));
    report.notes.extend(notes);
    Ok(FoldOutcome { fold, report, model })
}

/// Reports of every fold plus the mean and sample standard deviation of
/// their test accuracies.
#[derive(Clone, Debug)]
pub struct CrossValReport {
    pub folds: Vec<FoldOutcome>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(accuracies: &[f64]) -> (f64, f64) {
    let n = accuracies.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs every fold, at most `jobs` at a time. Results are ordered by fold.
pub fn crossvalidate(exp: &Experiment, ds: &Dataset, jobs: usize) -> Result<CrossValReport> {
    exp.validate(ds)?;
    let n = exp.protocol.folds();
    let jobs = jobs.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<FoldOutcome>>> = (0..n).map(|_| None).collect();
    for start in (0..n).step_by(jobs) {
        let end = (start + jobs).min(n);
        let results: Vec<Result<FoldOutcome>> = if end - start == 1 {
            vec![run_fold(exp, ds, start)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (start..end).map(|f| s.spawn(move || run_fold(exp, ds, f))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("fold worker panicked".into()))))
                    .collect()
            })
        };
        for (f, r) in (start..end).zip(results) {
            slots[f] = Some(r);
        }
    }
    let folds = slots
        .into_iter()
        .map(|s| s.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = folds.iter().filter_map(|f| f.report.test_accuracy).collect();
    let (mean, std) = summarize(&accs);
    Ok(CrossValReport { folds, mean, std })
}
