//! Dataset splits, the two frozen-feature protocols (linear probing and
//! attention MIL), their metrics, and report emission.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed::Bag;
use crate::fsutil::atomic_write;
use crate::json::{config_hash, to_canonical_string};
use crate::nn::{
    cosine_lr, softmax, AttentionMil, Differentiable, LinearProbe, LrSchedule, Matrix, OptState, OptimizerKind,
    Parameters,
};
use crate::{Error, Result, Rng};

/// Slack for `floor(n·r)` so products like `10 × 0.7` land on the intended
/// integer.
const FLOOR_EPS: f64 = 1e-9;

fn floor_count(n: usize, r: f64) -> usize {
    ((n as f64 * r + FLOOR_EPS).floor() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl Split {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Validation(format!("split ratios must be nonnegative: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("split ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Part sizes for `n` items: `floor(n·r)` each, then the leftover items go
/// one at a time to train, val, test, skipping parts with a zero ratio.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut sizes = ratios.map(|r| floor_count(n, r));
    let mut left = n.saturating_sub(sizes.iter().sum());
    let receivers: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();
    for &i in receivers.iter().cycle().take(left) {
        sizes[i] += 1;
        left -= 1;
    }
    debug_assert_eq!(left, 0);
    sizes
}

fn cut(order: &[usize], sizes: [usize; 3], out: &mut [Vec<usize>; 3]) {
    let (a, rest) = order.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    out[0].extend_from_slice(a);
    out[1].extend_from_slice(b);
    out[2].extend_from_slice(c);
}

/// Seeded train/val/test split over item indices. With `stratify`, the
/// size rule is applied per class and every class `0..=max(label)` must
/// have at least one item. Index lists come back sorted.
pub fn split_dataset(labels: &[usize], ratios: [f64; 3], seed: u64, stratify: bool) -> Result<Split> {
    check_ratios(ratios)?;
    if labels.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    let rng = Rng::new(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    if stratify {
        let n_classes = labels.iter().max().unwrap() + 1;
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        for (c, items) in by_class.iter().enumerate() {
            if items.is_empty() {
                return Err(Error::Validation(format!("class {c} has no items to stratify")));
            }
            let mut order = items.clone();
            rng.fork(c as u64).shuffle(&mut order);
            cut(&order, split_sizes(items.len(), ratios), &mut parts);
        }
    } else {
        let order = rng.fork(0).permutation(labels.len());
        cut(&order, split_sizes(labels.len(), ratios), &mut parts);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split {
        train,
        val,
        test,
        seed,
        ratios,
    })
}

/// Seeded hold-out of `max(1, floor(n·frac))` of `items` for validation.
/// Returns `(train, val)`, each sorted.
pub fn holdout_val(items: &[usize], frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Validation(format!("validation fraction must be in (0, 1), got {frac}")));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 items to hold out validation, got {n}")));
    }
    let n_val = floor_count(n, frac).clamp(1, n - 1);
    let mut order = items.to_vec();
    Rng::new(seed).shuffle(&mut order);
    let (val, train) = order.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann–Whitney U, so half-credit ties stay integral.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| positive[k]).count() as u64;
        let neg = group.len() as u64 - pos;
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    let total = 2 * n_pos * n_neg;
    // Dividing from whichever side is at most one half makes
    // auc(s, y) + auc(s, !y) == 1 hold exactly in floating point.
    Ok(if 2 * twice_u <= total {
        twice_u as f64 / total as f64
    } else {
        1.0 - (total - twice_u) as f64 / total as f64
    })
}

/// One-vs-rest AUC per class on the columns of `probs`, and their
/// unweighted mean.
pub fn auc_macro_ovr(probs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!("{} probability rows for {} labels", probs.rows(), labels.len())));
    }
    let c = probs.cols();
    if c < 2 {
        return Err(Error::invalid("macro AUC needs at least 2 classes"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {y} outside {c} classes")));
    }
    let per_class = (0..c)
        .map(|k| {
            if !labels.contains(&k) {
                return Err(Error::invalid(format!("class {k} absent from labels")));
            }
            let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, k)).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            auc_binary(&scores, &pos)
        })
        .collect::<Result<Vec<_>>>()?;
    let macro_auc = per_class.iter().sum::<f64>() / c as f64;
    Ok((macro_auc, per_class))
}

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!("{} rows for {} labels", features.rows(), labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    LinearProbe,
    Mil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Test metrics from the selected epoch, plus the validation score that
    /// selected it.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_auc: Option<Vec<f64>>,
    /// 1-based.
    pub best_epoch: usize,
    pub epochs: usize,
    pub split_sizes: SplitSizes,
    pub seed: u64,
    pub config_hash: String,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Selection metric on validation per epoch.
    pub val_metric: Vec<f64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.metrics.is_empty() {
            return bad("report has no metrics".into());
        }
        for (k, v) in &self.metrics {
            if !(0.0..=1.0).contains(v) {
                return bad(format!("metric {k} = {v} outside [0, 1]"));
            }
        }
        if let Some(auc) = &self.per_class_auc {
            if auc.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad("per-class AUC outside [0, 1]".into());
            }
        }
        if self.best_epoch == 0 || self.best_epoch > self.epochs {
            return bad(format!("best_epoch {} not in 1..={}", self.best_epoch, self.epochs));
        }
        if self.train_loss.len() != self.epochs || self.val_metric.len() != self.epochs {
            return bad("per-epoch history length differs from epochs".into());
        }
        if self.train_loss.iter().chain(&self.val_metric).any(|v| !v.is_finite()) {
            return bad("non-finite value in training history".into());
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, floats at six significant digits.
    pub fn to_canonical_json(&self) -> Result<String> {
        self.validate()?;
        to_canonical_string(&serde_json::to_value(self)?)
    }

    /// Parses and validates a report; a missing field is a validation error.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let report: Self =
            serde_json::from_value(v).map_err(|e| Error::Validation(format!("malformed report: {e}")))?;
        report.validate()?;
        Ok(report)
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    atomic_write(path, report.to_canonical_json()?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    EvalReport::parse(&std::fs::read_to_string(path)?)
}

/// Index of the first maximum, so ties go to the earliest epoch.
fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Validation share carved from train when no validation split is given.
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.epochs == 0 {
            return bad("probe.epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("probe.batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("probe.lr must be positive");
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return bad("probe.lr_min must be in [0, lr]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("probe.momentum must be in [0, 1)");
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return bad("probe.val_frac must be in (0, 1)");
        }
        Ok(())
    }
}

fn check_sets(sets: &[(&str, usize, usize)], dim: usize) -> Result<()> {
    for &(name, len, d) in sets {
        if len == 0 {
            return Err(Error::Validation(format!("{name} split is empty")));
        }
        if d != dim {
            return Err(Error::DimMismatch { expected: dim, found: d });
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= n_classes) {
        Some(y) => Err(Error::Validation(format!("label {y} outside {n_classes} classes"))),
        None => Ok(()),
    }
}

/// SGD with momentum under a cosine schedule; after each epoch the probe
/// is scored on validation top-1 accuracy and the best epoch (earliest on
/// ties) is kept and evaluated on test.
pub fn train_linear_probe(
    train: &LabeledSet,
    val: &LabeledSet,
    test: &LabeledSet,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, EvalReport)> {
    cfg.validate()?;
    let dim = train.dim();
    check_sets(
        &[
            ("train", train.len(), dim),
            ("val", val.len(), val.dim()),
            ("test", test.len(), test.dim()),
        ],
        dim,
    )?;
    if n_classes == 0 {
        return Err(Error::Validation("need at least one class".into()));
    }
    for s in [train, val, test] {
        check_labels(&s.labels, n_classes)?;
    }

    let rng = Rng::new(cfg.seed);
    let mut model = LinearProbe::init(n_classes, dim, &mut rng.fork(0));
    let mut order_rng = rng.fork(1);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.lr, cfg.lr_min, (cfg.epochs * steps_per_epoch) as u64)?;
    let mut opt = OptState::new(OptimizerKind::sgd(cfg.momentum), &model.param_shapes());

    let mut best: Option<LinearProbe> = None;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_metric = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(train.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(&x, &y)?;
            loss_sum += loss * batch.len() as f64;
            let lr = cosine_lr(&schedule, step)?;
            opt.step(&mut model.params_mut(), &grads, lr)?;
            step += 1;
        }
        if !model.is_finite() {
            return Err(Error::Validation("training diverged (non-finite parameters)".into()));
        }
        train_loss.push(loss_sum / train.len() as f64);
        let acc = accuracy(&model.predict(&val.features)?, &val.labels)?;
        if val_metric.iter().all(|&v| acc > v) {
            best = Some(model.clone());
        }
        val_metric.push(acc);
    }
    let model = best.expect("at least one epoch");
    let best_epoch = first_max(&val_metric) + 1;

    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), accuracy(&model.predict(&test.features)?, &test.labels)?);
    metrics.insert("val_accuracy".to_string(), val_metric[best_epoch - 1]);
    let report = EvalReport {
        protocol: Protocol::LinearProbe,
        metrics,
        per_class_auc: None,
        best_epoch,
        epochs: cfg.epochs,
        split_sizes: SplitSizes {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        train_loss,
        val_metric,
    };
    report.validate()?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            hidden: 64,
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.epochs == 0 {
            return bad("mil.epochs must be >= 1");
        }
        if self.hidden == 0 {
            return bad("mil.hidden must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("mil.lr must be positive");
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return bad("mil.lr_min must be in [0, lr]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("mil.weight_decay must be nonnegative");
        }
        Ok(())
    }
}

/// Class probabilities for each bag, computed in parallel, in bag order.
pub fn predict_bags(model: &AttentionMil, bags: &[Bag]) -> Result<Matrix> {
    let rows = bags
        .par_iter()
        .map(|b| model.predict_proba(&b.instances))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let r = probs.row(i);
            (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b })
        })
        .collect()
}

/// AdamW, one bag per step, under a cosine schedule; the epoch with the
/// highest validation macro AUC (earliest on ties) is kept and evaluated
/// on test. Validation and test must contain every class.
pub fn train_mil(
    train: &[Bag],
    val: &[Bag],
    test: &[Bag],
    n_classes: usize,
    cfg: &MilConfig,
) -> Result<(AttentionMil, EvalReport)> {
    cfg.validate()?;
    let dim = train.first().map_or(0, Bag::dim);
    let all = train.iter().chain(val).chain(test);
    check_sets(
        &[
            ("train", train.len(), dim),
            ("val", val.len(), dim),
            ("test", test.len(), dim),
        ],
        dim,
    )?;
    for b in all {
        if b.is_empty() {
            return Err(Error::Validation(format!("bag {} has no instances", b.slide_id)));
        }
        if b.dim() != dim {
            return Err(Error::DimMismatch { expected: dim, found: b.dim() });
        }
        if b.label >= n_classes {
            return Err(Error::Validation(format!("bag {} label {} outside {n_classes} classes", b.slide_id, b.label)));
        }
    }
    if n_classes < 2 {
        return Err(Error::Validation("MIL needs at least 2 classes".into()));
    }
    let first = train[0].label;
    if train.iter().all(|b| b.label == first) {
        return Err(Error::Validation("training bags all share one class".into()));
    }
    let val_labels: Vec<usize> = val.iter().map(|b| b.label).collect();
    let test_labels: Vec<usize> = test.iter().map(|b| b.label).collect();
    for (name, labels) in [("validation", &val_labels), ("test", &test_labels)] {
        if let Some(c) = (0..n_classes).find(|c| !labels.contains(c)) {
            return Err(Error::Validation(format!("{name} split has no bag of class {c}")));
        }
    }

    let rng = Rng::new(cfg.seed);
    let mut model = AttentionMil::init(dim, cfg.hidden, n_classes, &mut rng.fork(0))?;
    // A zero classifier gives attention no gradient until W_c has picked up
    // the class-correlated direction, which keeps random inits from locking
    // attention onto noise instances.
    model.wc = Matrix::zeros(n_classes, dim);
    let mut order_rng = rng.fork(1);
    let schedule = LrSchedule::new(cfg.lr, cfg.lr_min, (cfg.epochs * train.len()) as u64)?;
    let mut opt = OptState::new(OptimizerKind::adamw(cfg.weight_decay), &model.param_shapes());

    let mut best: Option<AttentionMil> = None;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_metric = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for i in order_rng.permutation(train.len()) {
            let bag = &train[i];
            let (loss, grads) = model.loss_and_grads(&bag.instances, &[bag.label])?;
            loss_sum += loss;
            let lr = cosine_lr(&schedule, step)?;
            opt.step(&mut model.params_mut(), &grads, lr)?;
            step += 1;
        }
        if !model.is_finite() {
            return Err(Error::Validation("training diverged (non-finite parameters)".into()));
        }
        train_loss.push(loss_sum / train.len() as f64);
        let (auc, _) = auc_macro_ovr(&predict_bags(&model, val)?, &val_labels)?;
        if val_metric.iter().all(|&v| auc > v) {
            best = Some(model.clone());
        }
        val_metric.push(auc);
    }
    let model = best.expect("at least one epoch");
    let best_epoch = first_max(&val_metric) + 1;

    let probs = predict_bags(&model, test)?;
    let (macro_auc, per_class) = auc_macro_ovr(&probs, &test_labels)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("macro_auc".to_string(), macro_auc);
    metrics.insert("accuracy".to_string(), accuracy(&argmax_rows(&probs), &test_labels)?);
    metrics.insert("val_macro_auc".to_string(), val_metric[best_epoch - 1]);
    let report = EvalReport {
        protocol: Protocol::Mil,
        metrics,
        per_class_auc: Some(per_class),
        best_epoch,
        epochs: cfg.epochs,
        split_sizes: SplitSizes {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        train_loss,
        val_metric,
    };
    report.validate()?;
    Ok((model, report))
}

/// Class probabilities from a probe, one row per input.
pub fn probe_probabilities(model: &LinearProbe, x: &Matrix) -> Result<Matrix> {
    let logits = model.forward(x)?;
    let rows: Vec<Vec<f64>> = (0..logits.rows()).map(|i| softmax(logits.row(i))).collect();
    Matrix::from_rows(&rows)
}
