//! Contrastive, center, cross-entropy and reconstruction losses.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Contrastive loss settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Distance beyond which different pairs contribute nothing.
    pub margin: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { margin: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::Config(format!("contrastive margin must be positive, got {margin}")));
        }
        Ok(ContrastiveConfig { margin })
    }
}

fn check_binary(labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Index(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Per-pair contrastive loss `y·½D² + (1−y)·½max(0, m−D)²` over embedding
/// batches `[B, d]`; `y = 1` marks a same pair. Returns `[B]`.
pub fn contrastive_terms(tape: &mut Tape, e1: Var, e2: Var, labels: &[u8], cfg: &ContrastiveConfig) -> Result<Var> {
    let shape = tape.shape(e1).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(shape_err!("contrastive loss expects [B, d] embeddings with d > 0, got {shape:?}"));
    }
    if labels.len() != shape[0] {
        return Err(shape_err!("{} labels for {} pairs", labels.len(), shape[0]));
    }
    check_binary(labels)?;
    let same = Tensor::from_vec(labels.iter().map(|&y| 0.5 * y as f64).collect());
    let diff = Tensor::from_vec(labels.iter().map(|&y| 0.5 * (1 - y) as f64).collect());
    let d = tape.pair_distance(e1, e2)?;
    let d2 = tape.square(d)?;
    let same = tape.constant(same);
    let pull = tape.mul(same, d2)?;
    let gap = tape.scale(d, -1.0)?;
    let gap = tape.add_scalar(gap, cfg.margin)?;
    let hinge = tape.relu(gap)?;
    let hinge = tape.square(hinge)?;
    let diff = tape.constant(diff);
    let push = tape.mul(diff, hinge)?;
    tape.add(pull, push)
}

/// Batch mean of [`contrastive_terms`].
pub fn contrastive_loss(tape: &mut Tape, e1: Var, e2: Var, labels: &[u8], cfg: &ContrastiveConfig) -> Result<Var> {
    let terms = contrastive_terms(tape, e1, e2, labels, cfg)?;
    tape.mean(terms)
}

/// Contrastive loss of one embedding pair on plain values.
pub fn contrastive_value(e1: &[f64], e2: &[f64], label: u8, cfg: &ContrastiveConfig) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(shape_err!("embedding lengths {} and {} differ", e1.len(), e2.len()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, e1.len()], e1.to_vec())?);
    let b = tape.constant(Tensor::new(vec![1, e2.len()], e2.to_vec())?);
    let l = contrastive_loss(&mut tape, a, b, &[label], cfg)?;
    tape.value(l).item()
}

/// Euclidean distances between rows of two `[B, d]` embedding batches.
pub fn pair_distances(e1: &Tensor, e2: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(e1.clone());
    let b = tape.constant(e2.clone());
    let d = tape.pair_distance(a, b)?;
    Ok(tape.value(d).data().to_vec())
}

/// Mean softmax cross-entropy of binary-class logits `[B, 2]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] != 2 {
        return Err(shape_err!("cross entropy expects [B, 2] logits, got {shape:?}"));
    }
    check_binary(labels)?;
    let idx: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let nll = tape.softmax_nll(logits, &idx)?;
    tape.mean(nll)
}

/// Weighted sum of squared differences, averaged over the leading batch
/// axis: `weight · Σ(decoded − original)² / B`.
pub fn reconstruction_loss(tape: &mut Tape, decoded: Var, original: Var, weight: f64) -> Result<Var> {
    let (ds, os) = (tape.shape(decoded).to_vec(), tape.shape(original).to_vec());
    if ds != os {
        return Err(shape_err!("reconstruction {ds:?} vs original {os:?}"));
    }
    let batch = ds.first().copied().unwrap_or(1).max(1);
    let diff = tape.sub(decoded, original)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, weight / batch as f64)
}

/// Centroids and settings of the center loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterState {
    /// `[classes, feature_dim]`.
    pub centroids: Tensor,
    /// Fraction of the way each centroid moves toward its batch mean.
    pub rate: f64,
    /// Weight of the intra-class term.
    pub balance: f64,
}

impl CenterState {
    pub fn new(classes: usize, feature_dim: usize, rate: f64, balance: f64) -> Result<Self> {
        if classes == 0 || feature_dim == 0 {
            return Err(Error::Config("center loss needs classes and features".into()));
        }
        if !(0.0..=1.0).contains(&rate) || !(balance >= 0.0) {
            return Err(Error::Config(format!(
                "center rate must lie in [0, 1] and balance be non-negative, got {rate} and {balance}"
            )));
        }
        Ok(CenterState {
            centroids: Tensor::zeros(&[classes, feature_dim]),
            rate,
            balance,
        })
    }

    pub fn classes(&self) -> usize {
        self.centroids.shape()[0]
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::Index(format!("class {bad} outside 0..{}", self.classes())));
        }
        Ok(())
    }

    /// Moves each labeled class centroid toward the mean of its features in
    /// the batch by `rate`. Classes absent from the batch stay put.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        self.check_labels(labels)?;
        let d = self.centroids.shape()[1];
        if features.shape() != [labels.len(), d] {
            return Err(shape_err!("features {:?} for {} labels of dim {d}", features.shape(), labels.len()));
        }
        let k = self.classes();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &y) in features.data().chunks(d).zip(labels) {
            counts[y] += 1;
            for (s, x) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
                *s += x;
            }
        }
        let rate = self.rate;
        for y in 0..k {
            if counts[y] == 0 {
                continue;
            }
            let c = &mut self.centroids.data_mut()[y * d..(y + 1) * d];
            for (ci, s) in c.iter_mut().zip(&sums[y * d..(y + 1) * d]) {
                let mean = s / counts[y] as f64;
                *ci += rate * (mean - *ci);
            }
        }
        Ok(())
    }
}

/// Softmax cross-entropy over `z = x·W + b`, summed over the batch, plus
/// `balance · Σ‖x_i − c_{y_i}‖²`. Centroids are constants here; move them
/// with [`CenterState::update`].
pub fn center_loss(
    tape: &mut Tape,
    features: Var,
    weight: Var,
    bias: Var,
    labels: &[usize],
    state: &CenterState,
) -> Result<Var> {
    state.check_labels(labels)?;
    let fs = tape.shape(features).to_vec();
    let d = state.centroids.shape()[1];
    if fs != [labels.len(), d] {
        return Err(shape_err!("features {fs:?} for {} labels of dim {d}", labels.len()));
    }
    let z = tape.matmul(features, weight)?;
    let z = tape.add_bias(z, bias)?;
    if tape.shape(z)[1] != state.classes() {
        return Err(shape_err!("{} logits for {} classes", tape.shape(z)[1], state.classes()));
    }
    let nll = tape.softmax_nll(z, labels)?;
    let ce = tape.sum(nll)?;
    let mut targets = Tensor::zeros(&fs);
    for (row, &y) in labels.iter().enumerate() {
        targets.data_mut()[row * d..(row + 1) * d].copy_from_slice(&state.centroids.data()[y * d..(y + 1) * d]);
    }
    let targets = tape.constant(targets);
    let off = tape.sub(features, targets)?;
    let sq = tape.square(off)?;
    let spread = tape.sum(sq)?;
    let spread = tape.scale(spread, state.balance)?;
    tape.add(ce, spread)
}
