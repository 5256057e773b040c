//! RMSprop training of pair models with early stopping and run reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::image;
use crate::losses::{contrastive_loss, cross_entropy, pair_distances, reconstruction_loss, ContrastiveConfig};
use crate::model::{Approach, Model, PairOutput};
use crate::pairing::PairSample;
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

/// Training objective for pair models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Contrastive,
}

impl LossKind {
    /// The objective that fits `approach`.
    pub fn for_approach(approach: Approach) -> LossKind {
        if approach.is_siamese() {
            LossKind::Contrastive
        } else {
            LossKind::CrossEntropy
        }
    }

    fn check(self, approach: Approach) -> Result<()> {
        if self != LossKind::for_approach(approach) {
            return Err(Error::Config(format!("loss {self:?} does not fit a {approach} model")));
        }
        Ok(())
    }
}

/// Quantity watched by early stopping; lower loss or higher accuracy is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitor {
    ValLoss,
    ValAcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub early_stopping: bool,
    pub monitor: Monitor,
    pub patience: usize,
    pub min_delta: f64,
    /// Reload the parameters of the best monitored epoch at the end.
    pub restore_best: bool,
    /// Contrastive margin.
    pub margin: f64,
    /// Weight of the decoder term added to the capsule siamese loss.
    pub reconstruction_weight: f64,
    pub precision: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            learning_rate: 1e-4,
            rho: 0.9,
            epsilon: 1e-8,
            early_stopping: true,
            monitor: Monitor::ValLoss,
            patience: 5,
            min_delta: 1e-4,
            restore_best: true,
            margin: 1.0,
            reconstruction_weight: 0.0005,
            precision: "f64".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        // zero freezes the parameters, which is useful for evaluation runs
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        if !(self.reconstruction_weight >= 0.0) {
            return bad(format!("reconstruction_weight must be >= 0, got {}", self.reconstruction_weight));
        }
        if self.precision != "f64" {
            return bad(format!("precision {:?} is not supported; only f64 is", self.precision));
        }
        ContrastiveConfig::new(self.margin).map(|_| ())
    }

    /// `key = value` lines describing the configuration.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let monitor = match self.monitor {
            Monitor::ValLoss => "val_loss",
            Monitor::ValAcc => "val_acc",
        };
        [
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("rho", self.rho.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("early_stopping", self.early_stopping.to_string()),
            ("monitor", monitor.to_string()),
            ("patience", self.patience.to_string()),
            ("min_delta", self.min_delta.to_string()),
            ("restore_best", self.restore_best.to_string()),
            ("margin", self.margin.to_string()),
            ("reconstruction_weight", self.reconstruction_weight.to_string()),
            ("precision", self.precision.clone()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One RMSprop update in place:
/// `s ← ρ·s + (1−ρ)·g²`, `p ← p − lr·g / (√s + ε)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut [f64], lr: f64, rho: f64, eps: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(shape_err!(
            "rmsprop: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.len()
        ));
    }
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter RMSprop accumulators for one run.
#[derive(Clone, Debug)]
pub struct RmsProp {
    rho: f64,
    eps: f64,
    state: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Self {
        RmsProp {
            rho,
            eps,
            state: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Applies the gradients a backward pass left on `tape`.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, lr: f64) -> Result<()> {
        for (id, g) in tape.param_grads() {
            let state = self
                .state
                .get_mut(id.0)
                .ok_or_else(|| Error::Index(format!("no optimizer state for parameter {}", id.0)))?;
            let p = store.get_mut(id);
            if p.shape() != g.shape() || p.shape() != state.shape() {
                return Err(shape_err!(
                    "parameter {:?}, gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    state.shape()
                ));
            }
            rmsprop_step(p.data_mut(), g.data(), state.data_mut(), lr, self.rho, self.eps)?;
        }
        Ok(())
    }
}

/// How pair scores become same/different predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decision {
    /// Score is the logit margin `same − different`; same iff positive.
    Argmax,
    /// Score is a distance; same iff below the threshold.
    Threshold(f64),
}

impl Decision {
    pub fn predict(self, score: f64) -> u8 {
        let same = match self {
            Decision::Argmax => score > 0.0,
            Decision::Threshold(t) => score < t,
        };
        u8::from(same)
    }
}

/// Fraction of pairs whose prediction matches the label.
pub fn pair_accuracy(scores: &[f64], labels: &[u8], decision: Decision) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("accuracy of an empty pair set".into()));
    }
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| decision.predict(s) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Distance threshold maximizing accuracy on labeled distances.
///
/// Candidates are the midpoints between consecutive distinct sorted
/// distances plus one point below and one above the range; the smallest
/// best candidate wins.
pub fn sweep_threshold(distances: &[f64], labels: &[u8]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Data("threshold sweep over no pairs".into()));
    }
    if distances.len() != labels.len() {
        return Err(shape_err!("{} distances for {} labels", distances.len(), labels.len()));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]));
    let diff_total = labels.iter().filter(|&&l| l == 0).count();
    // τ below everything: all predicted different
    let mut correct = diff_total;
    let mut best = (correct, distances[order[0]] - 1.0);
    let mut k = 0;
    while k < order.len() {
        let d = distances[order[k]];
        while k < order.len() && distances[order[k]] == d {
            if labels[order[k]] == 1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            k += 1;
        }
        let tau = if k < order.len() {
            0.5 * (d + distances[order[k]])
        } else {
            d + 1.0
        };
        if correct > best.0 {
            best = (correct, tau);
        }
    }
    Ok(best.1)
}

/// Metrics of one epoch; validation fields are empty without validation pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub approach: Approach,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the model holds at the end.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub threshold: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_time_secs: f64,
    pub config: Vec<(String, String)>,
    pub notes: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunReport {
    /// The report with the wall time zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("approach", self.approach.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs_run", self.epochs.len().to_string());
        kv("best_epoch", self.best_epoch.to_string());
        kv("stopped_early", self.stopped_early.to_string());
        kv("threshold", opt(self.threshold));
        kv("test_accuracy", opt(self.test_accuracy));
        if let Some(last) = self.epochs.last() {
            kv("final_train_loss", last.train_loss.to_string());
            kv("final_train_acc", last.train_acc.to_string());
            kv("final_val_loss", opt(last.val_loss));
            kv("final_val_acc", opt(last.val_acc));
        }
        kv("wall_time_secs", format!("{:.3}", self.wall_time_secs));
        for (k, v) in &self.config {
            kv(&format!("config.{k}"), v.clone());
        }
        for (i, n) in self.notes.iter().enumerate() {
            kv(&format!("note.{i}"), n.clone());
        }
        s
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc` rows.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.train_acc,
                opt(e.val_loss),
                opt(e.val_acc)
            );
        }
        s
    }

    /// Writes `report.txt` and `epochs.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.txt", self.to_text()), ("epochs.csv", self.epochs_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Loss and per-pair scores of one batch. Scores are logit margins for
/// merged models and embedding distances for siamese ones.
fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    ds: &Dataset,
    pairs: &[PairSample],
    cfg: &TrainConfig,
) -> Result<(Var, Vec<f64>)> {
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    match model.forward_pairs(tape, ds, pairs)? {
        PairOutput::Logits(logits) => {
            let v = tape.value(logits);
            let scores = (0..pairs.len()).map(|i| v.data()[2 * i + 1] - v.data()[2 * i]).collect();
            Ok((cross_entropy(tape, logits, &labels)?, scores))
        }
        PairOutput::Embeddings { a, b, capsules } => {
            let scores = pair_distances(tape.value(a), tape.value(b))?;
            let margin = ContrastiveConfig::new(cfg.margin)?;
            let mut loss = contrastive_loss(tape, a, b, &labels, &margin)?;
            if let (Some((ca, cb)), Some(net)) = (capsules, model.capsnet()) {
                if cfg.reconstruction_weight > 0.0 {
                    for (caps, side) in [(ca, Side::A), (cb, Side::B)] {
                        let masks = Model::capsule_masks(tape.value(caps))?;
                        let decoded = net.decode(tape, model.store(), caps, &masks)?;
                        let target = tape.constant(flat_targets(ds, pairs, side)?);
                        let r = reconstruction_loss(tape, decoded, target, cfg.reconstruction_weight)?;
                        loss = tape.add(loss, r)?;
                    }
                }
            }
            Ok((loss, scores))
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    A,
    B,
}

fn flat_targets(ds: &Dataset, pairs: &[PairSample], side: Side) -> Result<Tensor> {
    let imgs: Vec<_> = pairs
        .iter()
        .map(|p| ds.image(match side {
            Side::A => p.a,
            Side::B => p.b,
        }))
        .collect();
    let t = image::batch(&imgs)?;
    let n = t.shape()[0];
    let rest = t.numel() / n.max(1);
    t.reshape(&[n, rest])
}

/// Mean loss and scores over `pairs`, evaluated in batches without updates.
pub fn evaluate_loss(model: &Model, ds: &Dataset, pairs: &[PairSample], cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let mut tape = Tape::new();
        let (loss, s) = batch_loss(model, &mut tape, ds, chunk, cfg)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
        scores.extend(s);
    }
    Ok((total / pairs.len() as f64, scores))
}

/// Raw pair scores: logit margins (merged) or distances (siamese).
pub fn score_pairs(model: &Model, ds: &Dataset, pairs: &[PairSample]) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        reconstruction_weight: 0.0,
        ..Default::default()
    };
    evaluate_loss(model, ds, pairs, &cfg).map(|(_, s)| s)
}

/// The decision rule a trained model applies to its scores.
pub fn model_decision(model: &Model) -> Result<Decision> {
    if model.approach().is_siamese() {
        model
            .threshold()
            .map(Decision::Threshold)
            .ok_or_else(|| Error::State("siamese model has no distance threshold; train it first".into()))
    } else {
        Ok(Decision::Argmax)
    }
}

/// Accuracy of a trained model on labeled pairs. Siamese models use the
/// threshold chosen on validation distances during training.
pub fn evaluate_pairs(model: &Model, ds: &Dataset, pairs: &[PairSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let decision = model_decision(model)?;
    let scores = score_pairs(model, ds, pairs)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    pair_accuracy(&scores, &labels, decision)
}

/// Accuracy under the model's rule, choosing the siamese threshold on these scores.
fn fit_accuracy(approach: Approach, scores: &[f64], labels: &[u8]) -> Result<(f64, Option<f64>)> {
    if approach.is_siamese() {
        let t = sweep_threshold(scores, labels)?;
        Ok((pair_accuracy(scores, labels, Decision::Threshold(t))?, Some(t)))
    } else {
        Ok((pair_accuracy(scores, labels, Decision::Argmax)?, None))
    }
}

fn index_check(ds: &Dataset, pairs: &[PairSample]) -> Result<()> {
    if let Some(p) = pairs.iter().find(|p| p.a >= ds.len() || p.b >= ds.len() || p.label > 1) {
        return Err(Error::Index(format!(
            "pair ({}, {}, label {}) invalid for {} images",
            p.a,
            p.b,
            p.label,
            ds.len()
        )));
    }
    Ok(())
}

/// Trains `model` on `train_pairs`, validating on `val_pairs` each epoch.
///
/// Without validation pairs, early stopping watches the training loss and
/// the siamese threshold is fitted on training distances.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    train_pairs: &[PairSample],
    val_pairs: &[PairSample],
    loss_kind: LossKind,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    loss_kind.check(model.approach())?;
    if train_pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    model.check_dataset(ds)?;
    index_check(ds, train_pairs)?;
    index_check(ds, val_pairs)?;
    let start = Instant::now();
    let approach = model.approach();
    let mut opt = RmsProp::new(model.store(), cfg.rho, cfg.epsilon);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, Option<f64>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::derived_rng(cfg.seed, "epoch", epoch as u64));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
        }
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for (bi, batch) in batches.iter().enumerate() {
            let pairs: Vec<PairSample> = batch.iter().map(|&i| train_pairs[i]).collect();
            let ctx = |e: Error| e.context(format!("epoch {epoch}, batch {}", bi + 1));
            let mut tape = Tape::new();
            let (loss, s) = batch_loss(model, &mut tape, ds, &pairs, cfg).map_err(ctx)?;
            let lv = tape.value(loss).item().map_err(ctx)?;
            if !lv.is_finite() {
                return Err(ctx(Error::Numeric(format!("loss is {lv}"))));
            }
            tape.backward(loss).map_err(ctx)?;
            opt.step(model.store_mut(), &tape, cfg.learning_rate).map_err(ctx)?;
            loss_sum += lv * pairs.len() as f64;
            seen += pairs.len();
            scores.extend(s);
            labels.extend(pairs.iter().map(|p| p.label));
        }
        let train_loss = loss_sum / seen as f64;
        let (train_acc, train_tau) = fit_accuracy(approach, &scores, &labels)?;

        let (val_loss, val_acc, tau) = if val_pairs.is_empty() {
            (None, None, train_tau)
        } else {
            let (l, s) = evaluate_loss(model, ds, val_pairs, cfg).map_err(|e| e.context(format!("epoch {epoch}, validation")))?;
            let vl: Vec<u8> = val_pairs.iter().map(|p| p.label).collect();
            let (a, t) = fit_accuracy(approach, &s, &vl)?;
            (Some(l), Some(a), t)
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        model.set_threshold(tau);

        // lower is better
        let watched = match (cfg.monitor, val_loss, val_acc) {
            (Monitor::ValLoss, Some(l), _) => l,
            (Monitor::ValAcc, _, Some(a)) => -a,
            _ => train_loss,
        };
        let improved = best.as_ref().is_none_or(|b| watched < b.0 - cfg.min_delta);
        if improved {
            let snapshot = if cfg.restore_best { model.store().clone() } else { ParamStore::new() };
            best = Some((watched, epoch, snapshot, tau));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stopping && since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    let last = records.len();
    let mut best_epoch = last;
    if let Some((_, e, store, tau)) = best {
        if cfg.restore_best && e != last {
            *model.store_mut() = store;
            model.set_threshold(tau);
            best_epoch = e;
        }
    }
    if model.capsnet().is_some() {
        let idx: Vec<usize> = {
            let mut v: Vec<usize> = train_pairs.iter().flat_map(|p| [p.a, p.b]).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let err = reconstruction_error(model, ds, &idx, cfg.batch_size)?;
        model.capsnet_mut().expect("checked above").set_reconstruction_loss(Some(err));
    }
    Ok(RunReport {
        approach,
        seed: cfg.seed,
        epochs: records,
        best_epoch,
        stopped_early,
        threshold: model.threshold(),
        test_accuracy: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: cfg.snapshot(),
        notes: Vec::new(),
    })
}

/// Mean squared pixel error of decoding each image from its longest capsule.
pub fn reconstruction_error(model: &Model, ds: &Dataset, indices: &[usize], batch: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("no images to reconstruct".into()));
    }
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let (loss, n) = reconstruction_batch(model, &mut tape, ds, chunk)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
        pixels += n * chunk.len();
    }
    Ok(total / pixels as f64)
}

/// Sum-of-squares reconstruction loss averaged over the batch, and the pixel count per image.
fn reconstruction_batch(model: &Model, tape: &mut Tape, ds: &Dataset, idx: &[usize]) -> Result<(Var, usize)> {
    let net = model
        .capsnet()
        .ok_or_else(|| Error::Config(format!("{} models have no decoder", model.approach())))?;
    let imgs: Vec<_> = idx.iter().map(|&i| ds.image(i)).collect();
    let x = image::batch(&imgs)?;
    let n = x.shape()[0];
    let pixels = x.numel() / n;
    let target = x.clone().reshape(&[n, pixels])?;
    let xv = tape.constant(x);
    let enc = net.encode(tape, model.store(), xv)?;
    let masks = Model::capsule_masks(tape.value(enc.capsules))?;
    let decoded = net.decode(tape, model.store(), enc.capsules, &masks)?;
    let t = tape.constant(target);
    Ok((reconstruction_loss(tape, decoded, t, 1.0)?, pixels))
}

/// Trains a capsule model's encoder and decoder to reconstruct single
/// images, then records the mean squared pixel error on them.
/// Epoch records carry the per-pixel error in the loss columns.
pub fn train_reconstruction(model: &mut Model, ds: &Dataset, indices: &[usize], cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    if model.capsnet().is_none() {
        return Err(Error::Config(format!("{} models have no decoder", model.approach())));
    }
    if indices.is_empty() {
        return Err(Error::Data("no images to reconstruct".into()));
    }
    model.check_dataset(ds)?;
    let start = Instant::now();
    let mut opt = RmsProp::new(model.store(), cfg.rho, cfg.epsilon);
    let mut order = indices.to_vec();
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::derived_rng(cfg.seed, "recon-epoch", epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = |e: Error| e.context(format!("epoch {epoch}, batch {}", bi + 1));
            let mut tape = Tape::new();
            let (loss, pixels) = reconstruction_batch(model, &mut tape, ds, batch).map_err(ctx)?;
            // per-pixel mean keeps the step size independent of image size
            let scaled = tape.scale(loss, 1.0 / pixels as f64).map_err(ctx)?;
            let lv = tape.value(scaled).item().map_err(ctx)?;
            tape.backward(scaled).map_err(ctx)?;
            opt.step(model.store_mut(), &tape, cfg.learning_rate).map_err(ctx)?;
            sum += lv * batch.len() as f64;
            count += batch.len();
        }
        records.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            train_acc: 0.0,
            val_loss: None,
            val_acc: None,
        });
    }
    let err = reconstruction_error(model, ds, indices, cfg.batch_size)?;
    model.capsnet_mut().expect("checked above").set_reconstruction_loss(Some(err));
    Ok(RunReport {
        approach: model.approach(),
        seed: cfg.seed,
        best_epoch: records.len(),
        epochs: records,
        stopped_early: false,
        threshold: model.threshold(),
        test_accuracy: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: cfg.snapshot(),
        notes: vec![format!("reconstruction_mse = {err}")],
    })
}
