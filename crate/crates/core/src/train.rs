//! Loss, optimizers, the training loop and classification metrics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ForwardHooks, ModelState};

/// `−log softmax(logits)[label]` in log-sum-exp form.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Usage(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - z[label];
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross entropy is {loss}")));
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &ModelState) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
                Optimizer::Adam {
                    lr,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    /// Applies one update from the gradients currently held by `model`.
    pub fn step(&mut self, model: &mut ModelState) {
        match self {
            Optimizer::Sgd { lr } => {
                for p in model.params.iter_mut() {
                    let g = p.grad.data().to_vec();
                    for (w, g) in p.value.data_mut().iter_mut().zip(g) {
                        *w -= *lr * g;
                    }
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step);
                for ((p, m), v) in model.params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = p.grad.data().to_vec();
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *w -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Mean cross-entropy over a minibatch, recorded on one tape; gradients are
/// left in `model.params`.
pub fn batch_gradient(model: &mut ModelState, batch: &[&Sample]) -> Result<f64> {
    model.params.zero_grad();
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let (logits, _) = model.forward_on_tape(&mut tape, &s.image, ForwardHooks::default())?;
        losses.push(tape.cross_entropy(logits, s.label)?);
    }
    let loss = tape.mean_of(&losses)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?.accumulate_into(&mut model.params)?;
    Ok(value)
}

/// One pass over `data` in a seeded shuffled order (seed mixed with the
/// epoch index). Returns the mean of the minibatch losses.
pub fn train_epoch(
    model: &mut ModelState,
    data: &[Sample],
    tcfg: &TrainConfig,
    optimizer: &mut Optimizer,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    tcfg.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);

    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let loss = batch_gradient(model, &batch).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} batch {b}: {m}")),
            other => other,
        })?;
        optimizer.step(model);
        if !model.params.iter().all(|p| p.value.is_finite()) {
            return Err(Error::Numeric(format!(
                "epoch {epoch} batch {b}: parameters became non-finite"
            )));
        }
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Mean loss and predictions over `data` without updating anything.
pub fn predict_all(model: &ModelState, data: &[Sample]) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for s in data {
        let out = model.forward(&s.image)?;
        loss += cross_entropy(&out.logits, s.label)?;
        preds.push(out.logits.argmax(0)?[0]);
    }
    Ok((preds, loss / data.len().max(1) as f64))
}

/// Confusion matrix (rows truth, columns prediction) and derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision_per_class: Vec<f64>,
    pub recall_per_class: Vec<f64>,
    pub f1_per_class: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes whose precision, recall or F1 had a zero denominator and were
    /// reported as 0.
    #[serde(skip)]
    pub undefined: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        let mut undefined = Vec::new();
        for c in 0..k {
            let tp = confusion[c][c];
            let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
            let actual: u64 = confusion[c].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            let f = match (p, r) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                _ => None,
            };
            if p.is_none() || r.is_none() || f.is_none() {
                undefined.push(c);
            }
            precision.push(p.unwrap_or(0.0));
            recall.push(r.unwrap_or(0.0));
            f1.push(f.unwrap_or(0.0));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k.max(1) as f64;
        EvalReport {
            accuracy: ratio(correct, total).unwrap_or(0.0),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision_per_class: precision,
            recall_per_class: recall,
            f1_per_class: f1,
            confusion,
            undefined,
        }
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Usage("predictions and labels differ in length".into()));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &t) in predictions.iter().zip(labels) {
            if p >= num_classes || t >= num_classes {
                return Err(Error::Usage(format!("class index out of range for {num_classes} classes")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Human-readable table, optionally labelled with class names.
    pub fn table(&self, class_names: &[String]) -> String {
        let k = self.confusion.len();
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let w = (0..k).map(|i| name(i).len()).max().unwrap_or(1).max(9);
        let mut s = String::new();
        s.push_str(&format!("accuracy {:.4} over {} samples\n\n", self.accuracy, self.total()));
        s.push_str(&format!("{:<w$} {:>9} {:>9} {:>9}\n", "class", "precision", "recall", "f1"));
        for i in 0..k {
            let flag = if self.undefined.contains(&i) { " *" } else { "" };
            s.push_str(&format!(
                "{:<w$} {:>9.4} {:>9.4} {:>9.4}{flag}\n",
                name(i),
                self.precision_per_class[i],
                self.recall_per_class[i],
                self.f1_per_class[i]
            ));
        }
        s.push_str(&format!(
            "{:<w$} {:>9.4} {:>9.4} {:>9.4}\n",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        ));
        if !self.undefined.is_empty() {
            s.push_str("* zero denominator, reported as 0\n");
        }
        s.push_str("\nconfusion (rows truth, columns prediction)\n");
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            s.push_str(&format!("{:<w$} {}\n", name(i), cells.join("")));
        }
        s
    }
}

pub fn evaluate(model: &ModelState, data: &[Sample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let (preds, _) = predict_all(model, data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    EvalReport::from_predictions(&preds, &labels, model.config.num_classes)
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,split,accuracy,loss\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.accuracy, r.loss));
    }
    s
}

/// Trains for `tcfg.epochs`, recording train and test accuracy/loss after
/// every epoch. The train loss is the epoch's mean minibatch loss.
pub fn fit(
    model: &mut ModelState,
    train: &[Sample],
    test: &[Sample],
    tcfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    tcfg.validate()?;
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.learning_rate, model);
    let mut history = Vec::with_capacity(2 * tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let loss = train_epoch(model, train, tcfg, &mut opt, epoch)?;
        let (preds, _) = predict_all(model, train)?;
        let acc = accuracy_of(&preds, train);
        history.push(EpochRecord {
            epoch,
            split: "train",
            accuracy: acc,
            loss,
        });
        if !test.is_empty() {
            let (preds, test_loss) = predict_all(model, test)?;
            history.push(EpochRecord {
                epoch,
                split: "test",
                accuracy: accuracy_of(&preds, test),
                loss: test_loss,
            });
        }
        log::info!("epoch {epoch}: loss {loss:.5} train acc {acc:.4}");
    }
    Ok(history)
}

fn accuracy_of(preds: &[usize], data: &[Sample]) -> f64 {
    let correct = preds.iter().zip(data).filter(|(&p, s)| p == s.label).count();
    correct as f64 / data.len().max(1) as f64
}
