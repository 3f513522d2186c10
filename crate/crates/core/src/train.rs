//! Training on image-level labels and the classification metrics.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{eval_batches, DatasetSplit, ImageSample, Part, TrainingStream};
use crate::error::{Error, Result};
use crate::label::CrackLabel;
use crate::model::{classify, softmax, CrackNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Adam with weight decay folded into the gradient.
    Adam,
    /// Momentum SGD (0.9).
    Sgd,
}

impl FromStr for OptimizerName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerName::AdamW),
            "adam" => Ok(OptimizerName::Adam),
            "sgd" => Ok(OptimizerName::Sgd),
            other => Err(format!("unknown optimizer `{other}` (adamw|adam|sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    ValLoss,
    ValF1,
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "val-loss" | "loss" => Ok(Selection::ValLoss),
            "val-f1" | "f1" => Ok(Selection::ValF1),
            other => Err(format!("unknown selection `{other}` (val-loss|val-f1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Batch statistics in training, running statistics updated.
    FineTune,
    /// Running statistics used and kept fixed; affine parameters still train.
    Frozen,
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BnMode::FineTune => "fine-tune",
            BnMode::Frozen => "frozen",
        })
    }
}

impl FromStr for BnMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fine-tune" | "finetune" => Ok(BnMode::FineTune),
            "frozen" | "freeze" => Ok(BnMode::Frozen),
            other => Err(format!("unknown batch-norm mode `{other}` (fine-tune|frozen)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerName,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub balance: bool,
    pub augment: bool,
    pub selection: Selection,
    pub bn_mode: BnMode,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            optimizer: OptimizerName::AdamW,
            seed: 0,
            early_stop_patience: 10,
            balance: true,
            augment: true,
            selection: Selection::ValLoss,
            bn_mode: BnMode::FineTune,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 || self.eval_batch_size < 1 {
            return bad("batch sizes must be >= 1".into());
        }
        // zero is accepted so the optimizer identity can be exercised
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be a finite non-negative value, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Confusion matrix indexed `[truth][prediction]`, index 0 = crack.
pub type Confusion = [[u64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision_crack: f64,
    pub recall_crack: f64,
    pub f1_crack: f64,
    pub accuracy: f64,
    pub confusion_matrix: Confusion,
}

impl MetricsReport {
    /// Metrics on class `crack`; undefined ratios are reported as 0.
    pub fn from_confusion(cm: Confusion) -> Self {
        let tp = cm[0][0] as f64;
        let fn_ = cm[0][1] as f64;
        let fp = cm[1][0] as f64;
        let total: u64 = cm.iter().flatten().sum();
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
        MetricsReport {
            precision_crack: precision,
            recall_crack: recall,
            f1_crack: f1,
            accuracy: ratio((cm[0][0] + cm[1][1]) as f64, total as f64),
            confusion_matrix: cm,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (CrackLabel, CrackLabel)>) -> Self {
        let mut cm = [[0u64; 2]; 2];
        for (truth, pred) in pairs {
            cm[truth.index()][pred.index()] += 1;
        }
        Self::from_confusion(cm)
    }

    pub fn total(&self) -> u64 {
        self.confusion_matrix.iter().flatten().sum()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision {:.4}  recall {:.4}  f1 {:.4}  accuracy {:.4}  confusion {:?}",
            self.precision_crack, self.recall_crack, self.f1_crack, self.accuracy, self.confusion_matrix
        )
    }
}

/// Metrics plus mean cross-entropy over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub loss: f64,
    pub predictions: Vec<CrackLabel>,
}

pub fn cross_entropy(scores: [f64; 2], truth: CrackLabel) -> f64 {
    let m = scores[0].max(scores[1]);
    let lse = m + ((scores[0] - m).exp() + (scores[1] - m).exp()).ln();
    lse - scores[truth.index()]
}

/// Classifies every sample with [`classify`] and scores the result.
pub fn evaluate(model: &CrackNet, samples: &[&ImageSample], batch_size: usize) -> Result<MetricsReport> {
    Ok(evaluate_with_loss(model, samples, batch_size)?.metrics)
}

pub fn evaluate_with_loss(model: &CrackNet, samples: &[&ImageSample], batch_size: usize) -> Result<Evaluation> {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for batch in eval_batches(samples, batch_size) {
        let (images, labels) = batch?;
        let out = model.forward(&images)?;
        for (scores, truth) in out.scores.iter().zip(labels) {
            loss += cross_entropy(*scores, truth);
            pairs.push((truth, classify(*scores)?.label));
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok(Evaluation {
        metrics: MetricsReport::from_pairs(pairs.iter().copied()),
        loss: loss / n,
        predictions: pairs.into_iter().map(|(_, p)| p).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
    /// Best epoch so far by the selection criterion.
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f32 = 0.9;

/// First-order optimizer state, one slot per parameter tensor in
/// [`CrackNet::params_mut`] order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    name: OptimizerName,
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(name: OptimizerName, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            name,
            lr,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut CrackNet) {
        let mut params = model.params_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            if self.name != OptimizerName::Sgd {
                self.v = self.m.clone();
            }
        }
        self.step += 1;
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;
        match self.name {
            OptimizerName::Adam | OptimizerName::AdamW => {
                let t = self.step as i32;
                let bc1 = (1.0 - ADAM_BETA1.powi(t)) as f32;
                let bc2 = (1.0 - ADAM_BETA2.powi(t)) as f32;
                let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                let decoupled = self.name == OptimizerName::AdamW;
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.value.len() {
                        let mut g = p.grad[i];
                        if !decoupled {
                            g += wd * p.value[i];
                        }
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS as f32);
                        let decay = if decoupled { wd * p.value[i] } else { 0.0 };
                        p.value[i] -= lr * (update + decay);
                    }
                }
            }
            OptimizerName::Sgd => {
                for (p, m) in params.iter_mut().zip(&mut self.m) {
                    for i in 0..p.value.len() {
                        let g = p.grad[i] + wd * p.value[i];
                        m[i] = SGD_MOMENTUM * m[i] + g;
                        p.value[i] -= lr * m[i];
                    }
                }
            }
        }
    }
}

fn snapshot(model: &CrackNet) -> Vec<Vec<f32>> {
    model.named_tensors().into_iter().map(|t| t.data.to_vec()).collect()
}

fn restore(model: &mut CrackNet, snap: &[Vec<f32>]) {
    for (slot, data) in model.named_tensors_mut().into_iter().zip(snap) {
        slot.data.copy_from_slice(data);
    }
}

/// Runs one optimization step on a batch; returns the mean batch loss.
pub fn train_step(
    model: &mut CrackNet,
    optimizer: &mut Optimizer,
    images: &crate::tensor::Tensor,
    labels: &[CrackLabel],
) -> Result<f64> {
    model.zero_grad();
    let out = model.forward_train(images)?;
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(labels.len());
    for (scores, truth) in out.scores.iter().zip(labels) {
        loss += cross_entropy(*scores, *truth);
        let mut g = softmax(*scores);
        g[truth.index()] -= 1.0;
        grads.push([g[0] / n, g[1] / n]);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Ok(loss);
    }
    model.backward(&grads)?;
    optimizer.step(model);
    Ok(loss)
}

fn improves(selection: Selection, candidate: &EpochRecord, best: Option<&EpochRecord>) -> bool {
    let Some(best) = best else { return true };
    match selection {
        Selection::ValLoss => candidate.val_loss < best.val_loss,
        Selection::ValF1 => {
            let (a, b) = (candidate.val_metrics.f1_crack, best.val_metrics.f1_crack);
            a > b || (a == b && candidate.val_loss < best.val_loss)
        }
    }
}

/// Trains `model` on the split's training part, tracks validation loss and
/// metrics per epoch, and leaves the model holding the best epoch's weights.
pub fn train(
    model: &mut CrackNet,
    samples: &[ImageSample],
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    let val = split.samples(samples, Part::Val);
    if val.is_empty() {
        return Err(Error::InvalidTrainConfig("validation split is empty".into()));
    }
    let stream = TrainingStream::new(samples, split, config.batch_size, config.balance, config.augment, config.seed)?;
    model.set_bn_frozen(config.bn_mode == BnMode::Frozen);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay);
    let mut history = History::default();
    let mut best_weights = snapshot(model);
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in stream.epoch(epoch).enumerate() {
            let batch = batch?;
            let loss = match train_step(model, &mut optimizer, &batch.images, &batch.labels) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, batch: b }),
                Err(e) => return Err(e),
            };
            debug!("epoch {epoch} batch {b}: loss {loss:.6}");
            total += loss;
            batches += 1;
        }
        let eval = match evaluate_with_loss(model, &val, config.eval_batch_size) {
            Ok(e) if e.loss.is_finite() => e,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, batch: batches }),
            Err(e) => return Err(e),
        };
        let mut record = EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss: eval.loss,
            val_metrics: eval.metrics,
            best: false,
        };
        if improves(config.selection, &record, history.best()) {
            record.best = true;
            history.best_epoch = epoch;
            best_weights = snapshot(model);
            since_best = 0;
        } else {
            since_best += 1;
        }
        info!(
            "epoch {epoch}/{}: train loss {:.5}, val loss {:.5}, val f1 {:.4}, val acc {:.4}{}",
            config.epochs,
            record.train_loss,
            record.val_loss,
            record.val_metrics.f1_crack,
            record.val_metrics.accuracy,
            if record.best { " *" } else { "" }
        );
        history.records.push(record);
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience && epoch < config.epochs {
            info!("early stop after {epoch} epochs (best epoch {})", history.best_epoch);
            history.stopped_early = true;
            break;
        }
    }
    restore(model, &best_weights);
    model.set_bn_frozen(false);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let perfect = MetricsReport::from_confusion([[5, 0], [0, 7]]);
        assert_eq!(
            (perfect.precision_crack, perfect.recall_crack, perfect.f1_crack, perfect.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        let all_negative = MetricsReport::from_confusion([[0, 4], [0, 6]]);
        assert_eq!(all_negative.recall_crack, 0.0);
        assert_eq!(all_negative.f1_crack, 0.0);
        assert_eq!(all_negative.accuracy, 0.6);
        let empty = MetricsReport::from_confusion([[0, 0], [0, 0]]);
        assert_eq!(empty.accuracy, 0.0);
    }

    #[test]
    fn pairs_fill_confusion() {
        use CrackLabel::*;
        let m = MetricsReport::from_pairs([(Crack, Crack), (Crack, NonCrack), (NonCrack, Crack), (NonCrack, NonCrack), (NonCrack, NonCrack)]);
        assert_eq!(m.confusion_matrix, [[1, 1], [1, 2]]);
        assert_eq!(m.precision_crack, 0.5);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        for s in [[0.0, 0.0], [3.0, -1.0], [800.0, 0.0]] {
            let p = softmax(s);
            for t in [CrackLabel::Crack, CrackLabel::NonCrack] {
                let ce = cross_entropy(s, t);
                if p[t.index()] > 1e-300 {
                    assert!((ce + p[t.index()].ln()).abs() < 1e-12);
                }
                assert!(ce.is_finite());
            }
        }
        assert!((cross_entropy([0.0, 0.0], CrackLabel::Crack) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "optimizer": "sgd", "bn_mode": "frozen"}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.bn_mode, BnMode::Frozen);
        assert_eq!(parsed.learning_rate, 1e-4);
    }

    #[test]
    fn history_round_trips_as_jsonl() {
        let r = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            val_metrics: MetricsReport::from_confusion([[1, 2], [3, 4]]),
            best: true,
        };
        let h = History {
            records: vec![r.clone(), EpochRecord { epoch: 2, best: false, ..r }],
            best_epoch: 1,
            stopped_early: false,
        };
        let text = h.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(History::from_jsonl(&text).unwrap(), h.records);
    }

    proptest! {
        #[test]
        fn metric_identities(cm in prop::array::uniform2(prop::array::uniform2(0u64..500))) {
            let m = MetricsReport::from_confusion(cm);
            let total: u64 = cm.iter().flatten().sum();
            if total > 0 {
                prop_assert_eq!(m.accuracy, (cm[0][0] + cm[1][1]) as f64 / total as f64);
            }
            let (p, r) = (m.precision_crack, m.recall_crack);
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            prop_assert!((m.f1_crack - f1).abs() <= 4.0 * f64::EPSILON, "{} vs {}", m.f1_crack, f1);
            for v in [p, r, m.f1_crack, m.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
