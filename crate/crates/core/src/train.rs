//! Stratified cross-validation folds, AdamW with cosine annealing, and the
//! per-fold training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dfnc::DfncSequence;
use crate::error::{ensure, Error, Result};
use crate::eval::{classification_metrics, confusion_counts, MetricsRecord};
use crate::graph::Graph;
use crate::heap;
use crate::model::{sigmoid, Mode, Model, ModelParams};
use crate::seed;
use crate::tensor::Tensor;

/// Disjoint validation index sets, one per fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(train, validation)` indices for fold `i`, both sorted.
    pub fn split(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let val = self.folds[i].clone();
        let mut train: Vec<usize> = self.folds.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        train.sort_unstable();
        (train, val)
    }
}

/// Shuffles each class with a seeded generator and deals its members to
/// folds in turn, continuing the rotation across classes so fold sizes
/// also stay within one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed_value: u64) -> Result<FoldPlan> {
    ensure!(k >= 2, "need at least two folds, got {}", k);
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    for (&class, members) in &classes {
        if members.len() < k {
            return Err(Error::Stratification { class, count: members.len(), k });
        }
    }
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::tag("folds")]));
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for members in classes.values_mut() {
        members.shuffle(&mut rng);
        for &m in members.iter() {
            folds[next % k].push(m);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds, seed: seed_value })
}

/// `eta_min + (eta_max - eta_min) (1 + cos(pi e / E)) / 2`.
pub fn cosine_lr(epoch: usize, total: usize, eta_max: f64, eta_min: f64) -> Result<f64> {
    ensure!(total >= 1, "cosine schedule needs at least one epoch");
    ensure!(epoch <= total, "epoch {} beyond schedule length {}", epoch, total);
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + phase.cos()))
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimState {
    fn default() -> Self {
        OptimState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update: `w <- w - lr*wd*w`, then the bias-corrected Adam step.
/// Every gradient is checked before anything is modified.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = (&'a String, &'a mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    ensure!(lr >= 0.0 && weight_decay >= 0.0, "learning rate and weight decay must be nonnegative");
    let params: Vec<(&String, &mut Tensor)> = params.into_iter().collect();
    for (name, p) in &params {
        let g = grads.get(*name).ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
        ensure!(g.shape() == p.shape(), "gradient of `{}` has shape {:?}, parameter {:?}", name, g.shape(), p.shape());
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of `{name}`"), index });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= lr * weight_decay * *w;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Stable binary cross-entropy of one logit: `max(z,0) - z*y + ln(1 + e^-|z|)`.
pub fn bce_loss(z: f64, y: u8) -> Result<f64> {
    ensure!(y <= 1, "binary label must be 0 or 1, got {}", y);
    ensure!(z.is_finite(), "logit is not finite");
    Ok(z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p())
}

/// Cross-entropy of one logit vector against a class index.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    ensure!(label < logits.len(), "class {} out of range for {} logits", label, logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Weight positive examples by `n_neg / n_pos` in the binary loss.
    pub balance_classes: bool,
    /// Return the parameters of the epoch with the lowest validation loss
    /// instead of the final epoch.
    pub keep_best: bool,
    /// Positive prediction when the output score is at least this.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.05,
            balance_classes: false,
            keep_best: false,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Binary tasks only; empty for multi-class models.
    pub val_metrics: Vec<MetricsRecord>,
    pub lr: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }
}

/// A labelled subject: dFNC and class index (0/1 for binary tasks).
pub type Example<'a> = (&'a DfncSequence, usize);

/// Trains a fresh model on `train`, evaluating on `val` after every epoch.
/// Deterministic in `seed_value`.
pub fn train_fold(model: &Model, train: &[Example<'_>], val: &[Example<'_>], cfg: &TrainConfig, seed_value: u64) -> Result<(ModelParams, TrainHistory)> {
    ensure!(!train.is_empty() && !val.is_empty(), "training and validation sets must be nonempty");
    ensure!(cfg.epochs >= 1 && cfg.batch_size >= 1, "need at least one epoch and a positive batch size");
    let classes = model.config().n_classes;
    ensure!(train.iter().chain(val).all(|(_, y)| *y < classes), "labels must be below {} classes", classes);
    heap::retain_freed_memory();

    let mut config = model.config().clone();
    config.seed = seed::derive(seed_value, &[seed::tag("init")]);
    let model = Model::with_normalizer(config, model.normalizer())?;
    let mut params = model.init_params()?;
    let mut state = OptimState::default();
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::tag("train")]));
    let pos_weight = if cfg.balance_classes && classes == 2 {
        let pos = train.iter().filter(|(_, y)| *y == 1).count();
        ensure!(pos > 0, "class weighting needs at least one positive training subject");
        (train.len() - pos) as f64 / pos as f64
    } else {
        1.0
    };

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<Example<'_>> = batch.iter().map(|&i| train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &params, &examples, pos_weight, &mut rng).map_err(|e| wrap(epoch, e))?;
            loss_sum += loss * batch.len() as f64;
            adamw_step(params.iter_mut(), &grads, &mut state, lr, cfg.weight_decay).map_err(|e| wrap(epoch, e))?;
        }
        let (val_loss, metrics) = evaluate(&model, &params, val, cfg.threshold, pos_weight).map_err(|e| wrap(epoch, e))?;
        history.train_loss.push(loss_sum / train.len() as f64);
        history.val_loss.push(val_loss);
        if let Some(m) = metrics {
            history.val_metrics.push(m);
        }
        history.lr.push(lr);
        if cfg.keep_best && best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, params.clone(), epoch));
        }
    }
    history.selected_epoch = cfg.epochs - 1;
    if let Some((_, p, epoch)) = best {
        params = p;
        history.selected_epoch = epoch;
    }
    Ok((params, history))
}

fn wrap(epoch: usize, source: Error) -> Error {
    Error::Epoch { epoch, source: Box::new(source) }
}

/// Mean loss over a batch and its gradient for every parameter.
pub fn batch_gradients(
    model: &Model,
    params: &ModelParams,
    batch: &[Example<'_>],
    pos_weight: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, params);
    let inputs: Vec<&DfncSequence> = batch.iter().map(|(s, _)| *s).collect();
    let x = g.constant(model.stack_inputs(&inputs)?);
    let trace = model.forward_graph(&mut g, &bound, x, &mut Mode::Train(rng))?;
    let loss = if model.config().n_classes == 2 {
        let targets: Vec<f64> = batch.iter().map(|(_, y)| *y as f64).collect();
        let z = g.reshape(trace.logits, &[batch.len()])?;
        g.bce_with_logits(z, &targets, pos_weight)?
    } else {
        let targets: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        g.cross_entropy(trace.logits, &targets)?
    };
    let value = g.value(loss).item();
    ensure!(value.is_finite(), "training loss is not finite");
    let grads = g.backward(loss)?;
    let named = bound.iter().map(|(name, v)| (name.clone(), grads.get(*v))).collect();
    Ok((value, named))
}

/// Mean validation loss and, for binary models, thresholded metrics.
pub fn evaluate(model: &Model, params: &ModelParams, data: &[Example<'_>], threshold: f64, pos_weight: f64) -> Result<(f64, Option<MetricsRecord>)> {
    let mut logits = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let inputs: Vec<&DfncSequence> = chunk.iter().map(|(s, _)| *s).collect();
        logits.extend(model.logits(params, &inputs)?);
    }
    if model.config().n_classes == 2 {
        let mut loss = 0.0;
        let mut labels = Vec::with_capacity(data.len());
        let mut preds = Vec::with_capacity(data.len());
        for (z, (_, y)) in logits.iter().zip(data) {
            let w = if *y == 1 { pos_weight } else { 1.0 };
            loss += w * bce_loss(z[0], *y as u8)?;
            labels.push(*y as u8);
            preds.push(u8::from(sigmoid(z[0]) >= threshold));
        }
        let metrics = classification_metrics(&confusion_counts(&labels, &preds)?)?;
        Ok((loss / data.len() as f64, Some(metrics)))
    } else {
        let mut loss = 0.0;
        for (z, (_, y)) in logits.iter().zip(data) {
            loss += cross_entropy_loss(z, *y)?;
        }
        Ok((loss / data.len() as f64, None))
    }
}
