//! Per-fold training with min-validation-loss checkpointing, the 4-network
//! ensemble, and the rotated-query evaluation protocol.
//!
//! One optimizer step consumes a full shuffled, freshly augmented pass over
//! the fold's training images; an epoch is `steps_per_epoch` such steps
//! followed by one unaugmented eval-mode pass over the validation group. The
//! parameters kept are those of the epoch with the smallest validation loss,
//! earliest epoch on ties.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{draw_augmented, rotate, AugmentConfig, GrayImage};
use crate::data::{kfold_split, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::layers::{network_backward, network_forward, NetworkConfig, NetworkParams};
use crate::optim::{adam_step, cross_entropy, AdamHyper, AdamState};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

/// Stream tag under the master seed for the train/test membership draw.
pub const TAG_SPLIT: u64 = 0x73_706c_6974; // "split"
/// Stream tag under the master seed for the fold-group draw.
pub const TAG_KFOLD: u64 = 0x6b_666f_6c64; // "kfold"
/// Per-fold training seed tag under the master seed: `TAG_FOLD + fold_index`.
pub const TAG_FOLD: u64 = 0x66_6f6c_6400; // "fold" << 8

// Streams under a fold's own seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
/// Augmentation draws get one stream per (epoch, step, slot) so slots can be
/// filled in parallel without order sensitivity.
const TAG_AUG: u64 = 3 << 60;

fn aug_tag(epoch: usize, step: usize, slot: usize) -> u64 {
    TAG_AUG | ((epoch as u64) << 32) | ((step as u64) << 16) | slot as u64
}

// ---------------------------------------------------------------------------
// configuration

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs per fold.
    pub epochs: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    /// Examples per step, capped at the fold training-set size (which it
    /// equals in the reference protocol: one full pass per step).
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub adam: AdamHyper,
    pub network: NetworkConfig,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            steps_per_epoch: 20,
            batch_size: 180,
            augment: AugmentConfig::default(),
            adam: AdamHyper::default(),
            network: NetworkConfig::default(),
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs, steps_per_epoch and batch_size must be at least 1".into(),
            ));
        }
        // the (epoch, step, slot) stream-tag packing needs disjoint bit fields
        if self.epochs >= 1 << 28 || self.steps_per_epoch >= 1 << 16 || self.batch_size >= 1 << 16
        {
            return Err(Error::Parameter(format!(
                "{} epochs x {} steps x {} batch exceeds the supported range",
                self.epochs, self.steps_per_epoch, self.batch_size
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite())
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
            || !(self.adam.eps > 0.0)
        {
            return Err(Error::Parameter(
                "adam hyperparameters out of range (lr > 0, 0 <= beta < 1, eps > 0)".into(),
            ));
        }
        self.augment.validate()?;
        self.network.validate()
    }
}

// ---------------------------------------------------------------------------
// fold training

/// One epoch's record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the step losses.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Parameter snapshot at the epoch with the smallest validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    /// 1-based epoch of the snapshot, earliest on ties.
    pub epoch_of_best: usize,
    pub best_val_loss: f64,
    /// Which cross-validation group this network validated on (0-3).
    pub fold_index: usize,
}

/// Earliest position of the minimum as a 1-based epoch, with the minimum.
/// Panics on an empty slice (a run has at least one epoch).
pub fn best_epoch(val_losses: &[f64]) -> (usize, f64) {
    assert!(!val_losses.is_empty(), "no epochs recorded");
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best] {
            best = i;
        }
    }
    (best + 1, val_losses[best])
}

fn batch_tensor(examples: &[LabeledExample], side: usize) -> Result<Tensor> {
    let mut buf = vec![0.0; examples.len() * side * side];
    for (chunk, ex) in buf.chunks_mut(side * side).zip(examples) {
        chunk.copy_from_slice(ex.image.pixels());
    }
    Tensor::from_vec(&[examples.len(), 1, side, side], buf)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains one fold network and returns its checkpoint plus the per-epoch
/// history. `fold_seed` isolates this fold's randomness; two calls with the
/// same data, config and seed produce identical results.
pub fn train_fold(
    train: &[LabeledExample],
    val: &[LabeledExample],
    cfg: &TrainConfig,
    fold_index: usize,
    fold_seed: u64,
) -> Result<(Checkpoint, Vec<EpochStats>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(
            "fold training and validation sets must be non-empty".into(),
        ));
    }
    if fold_index > 3 {
        return Err(Error::Parameter(format!(
            "fold index {fold_index}, expected 0-3"
        )));
    }
    let s = cfg.network.input;
    for ex in train.iter().chain(val) {
        if ex.image.width() != s || ex.image.height() != s {
            return Err(Error::Dimension(format!(
                "{}x{} image in fold data, network expects {s}x{s}",
                ex.image.width(),
                ex.image.height()
            )));
        }
        if ex.label >= cfg.network.classes {
            return Err(Error::Dataset(format!(
                "label {} with {} classes",
                ex.label, cfg.network.classes
            )));
        }
    }

    let mut init_rng = stream_rng(fold_seed, STREAM_INIT);
    let mut params = NetworkParams::init(&cfg.network, &mut init_rng)?;
    let mut shuffle_rng = stream_rng(fold_seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(fold_seed, STREAM_DROPOUT);
    let mut adam = AdamState::new(&cfg.network)?;

    // the validation batch is fixed and unaugmented; build it once
    let val_input = batch_tensor(val, s)?;
    let val_labels: Vec<usize> = val.iter().map(|ex| ex.label).collect();

    let n = train.len();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_buf = vec![0.0; batch * s * s];
    let mut batch_labels = vec![0usize; batch];

    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, NetworkParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            order.shuffle(&mut shuffle_rng);
            let chosen = &order[..batch];
            for (slot, &i) in chosen.iter().enumerate() {
                batch_labels[slot] = train[i].label;
            }
            batch_buf
                .par_chunks_mut(s * s)
                .enumerate()
                .try_for_each(|(slot, out)| -> Result<()> {
                    let mut rng = stream_rng(fold_seed, aug_tag(epoch, step, slot));
                    let img = draw_augmented(&train[chosen[slot]].image, &cfg.augment, &mut rng)?;
                    out.copy_from_slice(img.pixels());
                    Ok(())
                })?;
            let input = Tensor::from_vec(&[batch, 1, s, s], batch_buf.clone())?;
            let (probs, cache) =
                network_forward(&params, &cfg.network, input, Some(&mut dropout_rng))?;
            loss_sum += cross_entropy(&probs, &batch_labels)?;
            let grads = network_backward(&params, &cfg.network, &cache, &probs, &batch_labels)?;
            adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;
        }
        let train_loss = loss_sum / cfg.steps_per_epoch as f64;

        let (val_probs, _) = network_forward(&params, &cfg.network, val_input.clone(), None)?;
        let val_loss = cross_entropy(&val_probs, &val_labels)?;
        let hits = val_probs
            .data()
            .chunks(cfg.network.classes)
            .zip(&val_labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        let val_acc = hits as f64 / val_labels.len() as f64;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        // strict < keeps the earliest epoch on ties
        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, params.clone()));
        }
    }

    let (epoch_of_best, best_val_loss, best_params) = best.expect("at least one epoch ran");
    Ok((
        Checkpoint {
            params: best_params,
            epoch_of_best,
            best_val_loss,
            fold_index,
        },
        history,
    ))
}

// ---------------------------------------------------------------------------
// ensemble

/// The four fold networks. Predictions average their softmax outputs.
#[derive(Debug, Clone)]
pub struct Ensemble {
    checkpoints: Vec<Checkpoint>,
    net: NetworkConfig,
}

impl Ensemble {
    /// Exactly one checkpoint per fold 0-3, all realizing one architecture.
    pub fn new(checkpoints: Vec<Checkpoint>) -> Result<Ensemble> {
        if checkpoints.len() != 4 {
            return Err(Error::Parameter(format!(
                "{} checkpoints, expected 4",
                checkpoints.len()
            )));
        }
        let mut seen = [false; 4];
        for c in &checkpoints {
            if c.fold_index > 3 || seen[c.fold_index] {
                return Err(Error::Parameter(format!(
                    "fold indices must cover 0-3 once each (saw {} twice or out of range)",
                    c.fold_index
                )));
            }
            seen[c.fold_index] = true;
        }
        let net = checkpoints[0].params.config()?;
        for c in &checkpoints[1..] {
            if c.params.config()? != net {
                return Err(Error::Dimension(
                    "checkpoints realize different architectures".into(),
                ));
            }
        }
        Ok(Ensemble { checkpoints, net })
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Checkpoint that validated on group `i`.
    pub fn fold(&self, i: usize) -> &Checkpoint {
        self.checkpoints
            .iter()
            .find(|c| c.fold_index == i)
            .expect("one checkpoint per fold")
    }

    /// The shared architecture (eval form: dropout rates zero).
    pub fn network(&self) -> &NetworkConfig {
        &self.net
    }
}

/// Trains the four fold networks. `rng` drives the fold-group draw; each
/// fold's own randomness derives from the master seed and its fold index, so
/// the result is a pure function of (dataset, config, rng state).
pub fn train_ensemble(
    train_ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Ensemble, Vec<Vec<EpochStats>>)> {
    cfg.validate()?;
    let folds = kfold_split(train_ds, 4, rng)?;
    let mut checkpoints = Vec::with_capacity(4);
    let mut histories = Vec::with_capacity(4);
    for fold in 0..4 {
        let train_set: Vec<LabeledExample> = folds
            .training(fold)
            .iter()
            .map(|&i| train_ds.examples()[i].clone())
            .collect();
        let val_set: Vec<LabeledExample> = folds
            .validation(fold)
            .iter()
            .map(|&i| train_ds.examples()[i].clone())
            .collect();
        let fold_seed = derive_seed(cfg.master_seed, TAG_FOLD + fold as u64);
        let (ckpt, hist) = train_fold(&train_set, &val_set, cfg, fold, fold_seed)?;
        checkpoints.push(ckpt);
        histories.push(hist);
    }
    Ok((Ensemble::new(checkpoints)?, histories))
}

/// Elementwise mean of equally long probability rows.
pub fn mean_probs(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Parameter("mean of zero probability rows".into()))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Dimension(
            "probability rows differ in length".into(),
        ));
    }
    let scale = 1.0 / rows.len() as f64;
    let mut out = vec![0.0; first.len()];
    for row in rows {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o *= scale;
    }
    Ok(out)
}

/// Eval-mode ensemble probabilities for a batch already shaped
/// `[n, 1, s, s]`. Folds are summed in index order, so the result does not
/// depend on checkpoint storage order.
fn ensemble_probs_batch(e: &Ensemble, input: &Tensor) -> Result<Tensor> {
    let n = input.dims()[0];
    let mut acc = Tensor::zeros(&[n, e.net.classes])?;
    for fold in 0..4 {
        let (probs, _) = network_forward(&e.fold(fold).params, &e.net, input.clone(), None)?;
        for (a, &p) in acc.data_mut().iter_mut().zip(probs.data()) {
            *a += p;
        }
    }
    for a in acc.data_mut() {
        *a *= 0.25;
    }
    Ok(acc)
}

/// Mean of the four networks' softmax outputs on one image.
pub fn predict_ensemble(e: &Ensemble, img: &GrayImage) -> Result<Vec<f64>> {
    let s = e.net.input;
    if img.width() != s || img.height() != s {
        return Err(Error::Dimension(format!(
            "{}x{} image, ensemble expects {s}x{s}",
            img.width(),
            img.height()
        )));
    }
    let input = Tensor::from_vec(&[1, 1, s, s], img.pixels().to_vec())?;
    Ok(ensemble_probs_batch(e, &input)?.data().to_vec())
}

// ---------------------------------------------------------------------------
// evaluation

/// Ensemble performance on a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Predicted class per example, dataset order.
    pub predictions: Vec<usize>,
    /// `confusion[true_class][predicted_class]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, correct count and the k-by-k confusion matrix (rows are true
/// classes) of a prediction list.
pub fn accuracy_and_confusion(
    labels: &[usize],
    preds: &[usize],
    k: usize,
) -> Result<(f64, usize, Vec<Vec<usize>>)> {
    if labels.is_empty() || labels.len() != preds.len() {
        return Err(Error::Dimension(format!(
            "{} labels against {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.iter().chain(preds).any(|&v| v >= k) {
        return Err(Error::Dimension(format!("class index out of range 0..{k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (&t, &p) in labels.iter().zip(preds) {
        confusion[t][p] += 1;
        if t == p {
            correct += 1;
        }
    }
    Ok((correct as f64 / labels.len() as f64, correct, confusion))
}

/// Argmax-of-mean-probability classification over a whole dataset.
pub fn evaluate_testset(e: &Ensemble, test: &Dataset) -> Result<TestReport> {
    if test.side() != e.net.input {
        return Err(Error::Dimension(format!(
            "{0}x{0} test images, ensemble expects {1}x{1}",
            test.side(),
            e.net.input
        )));
    }
    if test.class_count() > e.net.classes {
        return Err(Error::Dimension(format!(
            "{} dataset classes, network has {}",
            test.class_count(),
            e.net.classes
        )));
    }
    let input = batch_tensor(test.examples(), test.side())?;
    let probs = ensemble_probs_batch(e, &input)?;
    let predictions: Vec<usize> = probs.data().chunks(e.net.classes).map(argmax).collect();
    let labels: Vec<usize> = test.examples().iter().map(|ex| ex.label).collect();
    let (accuracy, correct, confusion) =
        accuracy_and_confusion(&labels, &predictions, e.net.classes)?;
    Ok(TestReport {
        accuracy,
        correct,
        total: labels.len(),
        predictions,
        confusion,
    })
}

/// One angle's ensemble output.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleRow {
    pub angle_deg: u32,
    /// Full-precision class probabilities, summing to 1.
    pub probs: Vec<f64>,
    /// The same values rounded to two significant digits.
    pub display: Vec<String>,
}

/// Ensemble outputs for the four 90-degree rotations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityReport {
    pub rows: Vec<AngleRow>,
}

/// Runs the rotation protocol: the image is classified at 0, 90, 180 and
/// 270 degrees (exact pixel permutations, no resampling).
pub fn evaluate_rotations(e: &Ensemble, img: &GrayImage) -> Result<ProbabilityReport> {
    let mut rows = Vec::with_capacity(4);
    for angle in [0u32, 90, 180, 270] {
        let rotated = rotate(img, f64::from(angle));
        let probs = predict_ensemble(e, &rotated)?;
        let display = probs.iter().map(|&p| format_sig2(p)).collect();
        rows.push(AngleRow {
            angle_deg: angle,
            probs,
            display,
        });
    }
    Ok(ProbabilityReport { rows })
}

impl ProbabilityReport {
    /// Right-aligned table of the two-significant-digit values, one row per
    /// angle, one column per class.
    pub fn display_table(&self, class_names: &[String]) -> Result<String> {
        let classes = self.rows.first().map_or(0, |r| r.probs.len());
        if class_names.len() != classes {
            return Err(Error::Dimension(format!(
                "{} class names for {classes} probability columns",
                class_names.len()
            )));
        }
        let mut widths: Vec<usize> = class_names.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, d) in widths.iter_mut().zip(&row.display) {
                *w = (*w).max(d.len());
            }
        }
        let aw = "angle".len();
        let mut out = format!("{:>aw$}", "angle");
        for (name, w) in class_names.iter().zip(&widths) {
            out.push_str(&format!("  {name:>w$}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:>aw$}", row.angle_deg));
            for (d, w) in row.display.iter().zip(&widths) {
                out.push_str(&format!("  {d:>w$}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Full-precision CSV: `angle_deg,p_class0,...`.
    pub fn to_csv(&self) -> String {
        let classes = self.rows.first().map_or(0, |r| r.probs.len());
        let mut out = String::from("angle_deg");
        for c in 0..classes {
            out.push_str(&format!(",p_class{c}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{}", row.angle_deg));
            for p in &row.probs {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Rounds to two significant digits for display. The decimal count follows
/// the rounded value, so 0.999 prints as "1.0", not "1.00".
pub fn format_sig2(x: f64) -> String {
    if x == 0.0 {
        return "0.0".into();
    }
    let mag = magnitude(x.abs());
    let quantum = pow10(mag - 1);
    let rounded = (x / quantum).round() * quantum;
    let mag2 = if rounded == 0.0 {
        mag
    } else {
        magnitude(rounded.abs())
    };
    let decimals = (1 - mag2).max(0) as usize;
    format!("{rounded:.decimals$}")
}

fn pow10(e: i32) -> f64 {
    10f64.powi(e)
}

/// floor(log10(x)) for x > 0, corrected at decade boundaries where the
/// float log lands one off.
fn magnitude(x: f64) -> i32 {
    let mut m = x.log10().floor() as i32;
    if pow10(m + 1) <= x {
        m += 1;
    } else if x < pow10(m) {
        m -= 1;
    }
    m
}

// ---------------------------------------------------------------------------
// checkpoint files

const CKPT_MAGIC: &[u8; 4] = b"LNR1";
// corrupt shape tables must not drive allocations
const MAX_CKPT_RANK: u32 = 8;
const MAX_CKPT_ELEMS: usize = 1 << 30;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes `LNR1`, the shape table, every parameter value as little-endian
/// f64 in declaration order, then fold index, best epoch and best loss.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut out, 8);
    for t in ckpt.params.tensors() {
        push_u32(&mut out, t.rank() as u32);
        for &d in t.dims() {
            push_u32(&mut out, d as u32);
        }
    }
    for t in ckpt.params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_u32(&mut out, ckpt.fold_index as u32);
    push_u32(&mut out, ckpt.epoch_of_best as u32);
    out.extend_from_slice(&ckpt.best_val_loss.to_le_bytes());
    fs::write(path, &out).map_err(|e| io_err(path, e))
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), format!("truncated in {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], rejecting anything
/// malformed: wrong magic, incoherent shapes, truncation, trailing bytes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = ByteCursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = cur.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(cur.err(0, format!("magic {magic:?}, expected {CKPT_MAGIC:?}")));
    }
    let count_at = cur.pos;
    let count = cur.u32("tensor count")?;
    if count != 8 {
        return Err(cur.err(count_at, format!("{count} tensors, expected 8")));
    }

    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(8);
    for i in 0..8 {
        let rank_at = cur.pos;
        let rank = cur.u32("shape table")?;
        if rank == 0 || rank > MAX_CKPT_RANK {
            return Err(cur.err(rank_at, format!("tensor {i} rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elems = 1usize;
        for _ in 0..rank {
            let d_at = cur.pos;
            let d = cur.u32("shape table")? as usize;
            elems = elems.saturating_mul(d);
            if d == 0 || elems > MAX_CKPT_ELEMS {
                return Err(cur.err(d_at, format!("tensor {i} extent {d} out of range")));
            }
            dims.push(d);
        }
        shapes.push(dims);
    }

    let mut tensors = Vec::with_capacity(8);
    for dims in &shapes {
        let len: usize = dims.iter().product();
        let raw = cur.take(len * 8, "parameter values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(dims, data)?);
    }

    let fold_at = cur.pos;
    let fold_index = cur.u32("metadata")? as usize;
    if fold_index > 3 {
        return Err(cur.err(fold_at, format!("fold index {fold_index}, expected 0-3")));
    }
    let epoch_at = cur.pos;
    let epoch_of_best = cur.u32("metadata")? as usize;
    if epoch_of_best == 0 {
        return Err(cur.err(epoch_at, "best epoch 0, epochs are 1-based".to_string()));
    }
    let loss_at = cur.pos;
    let best_val_loss = cur.f64("metadata")?;
    if !best_val_loss.is_finite() {
        return Err(cur.err(loss_at, "best validation loss is not finite".to_string()));
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    Ok(Checkpoint {
        params: NetworkParams::from_tensors(tensors)?,
        epoch_of_best,
        best_val_loss,
        fold_index,
    })
}

// ---------------------------------------------------------------------------
// history files

const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_acc";

/// Writes the per-epoch history as CSV. Values use the shortest
/// representation that parses back to the same float.
pub fn write_history(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.val_acc
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a history CSV written by [`write_history`].
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochStats>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let fmt = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };

    let mut history = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() + 1;
        if lineno == 0 {
            if line != HISTORY_HEADER {
                return Err(fmt(0, format!("header {line:?}, expected {HISTORY_HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(fmt(
                at,
                format!("line {}: {} fields, expected 4", lineno + 1, fields.len()),
            ));
        }
        let bad = |what: &str| fmt(at, format!("line {}: unparsable {what}", lineno + 1));
        history.push(EpochStats {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: fields[1].parse().map_err(|_| bad("train_loss"))?,
            val_loss: fields[2].parse().map_err(|_| bad("val_loss"))?,
            val_acc: fields[3].parse().map_err(|_| bad("val_acc"))?,
        });
    }
    Ok(history)
}
