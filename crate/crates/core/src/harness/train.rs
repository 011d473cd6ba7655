use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{Model, ModelDims, ModelKind};
use crate::data::{build_vocab, tokenize, DatasetSplit, LabeledExample, Vocab, DEFAULT_MAX_SEQ_LEN};
use crate::encoders::Parameterized;
use crate::error::{Error, Result};
use crate::losses::{loss_batch, LossConfig};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::numerics::Tensor;
use crate::optim::{OptimHyper, Optimizer, OptimizerKind};

fn default_batch_size() -> usize {
    8
}
fn default_max_seq_len() -> usize {
    DEFAULT_MAX_SEQ_LEN
}
fn default_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    5
}
fn default_name() -> String {
    "run".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default)]
    pub dims: ModelDims,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub hyper: OptimHyper,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without a validation improvement before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Class count; inferred from the largest label in the split when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Off by default so traces stay bitwise reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_model() -> ModelKind {
    ModelKind::Transformer
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adabound
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_seq_len", self.max_seq_len),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("`{name}` must be at least 1")));
            }
        }
        if let Some(c) = self.classes {
            if c < 2 {
                return Err(Error::invalid("`classes` must be at least 2"));
            }
        }
        self.dims.validate(self.model)?;
        self.loss.validate()?;
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,wall_time_s\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{:.6}\n",
                r.epoch, r.train_loss, r.val_accuracy, r.wall_time
            ));
        }
        out
    }
}

fn tokenized(examples: &[LabeledExample], vocab: &Vocab, max_len: usize) -> Result<Vec<(Vec<usize>, usize)>> {
    examples
        .iter()
        .map(|e| Ok((tokenize(&e.text, vocab, max_len)?, e.label)))
        .collect()
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn accuracy(model: &Model, data: &[(Vec<usize>, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (tokens, label) in data {
        if argmax(&model.logits(tokens)?) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains on `split.train`, selects the epoch with the best validation
/// accuracy (earliest on ties) and returns it as a checkpoint.
pub fn train(config: &TrainConfig, split: &DatasetSplit) -> Result<(Checkpoint, TrainTrace)> {
    config.validate()?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::invalid(format!("the {name} partition is empty")));
        }
    }
    let max_label = split
        .train
        .iter()
        .chain(&split.val)
        .chain(&split.test)
        .map(|e| e.label)
        .max()
        .expect("non-empty");
    let classes = config.classes.unwrap_or((max_label + 1).max(2));
    if max_label >= classes {
        return Err(Error::LabelOutOfRange {
            label: max_label,
            classes,
        });
    }

    // the vocabulary sees the training partition only
    let vocab = build_vocab(&split.train, 1)?;
    let train_set = tokenized(&split.train, &vocab, config.max_seq_len)?;
    let val_set = tokenized(&split.val, &vocab, config.max_seq_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(&mut rng, config.model, &config.dims, vocab.len(), config.max_seq_len, classes)?;
    let mut grads = model.zeros_like();
    let mut optimizer = Optimizer::new(config.optimizer, config.hyper);

    let started = Instant::now();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut logits = Vec::with_capacity(batch.len() * classes);
            let mut caches = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (tokens, label) = &train_set[i];
                let (l, cache) = model.forward(tokens)?;
                logits.extend(l);
                caches.push(cache);
                labels.push(*label);
            }
            let logits = Tensor::matrix(batch.len(), classes, logits)?;
            let (value, d_logits) = loss_batch(&logits, &labels, &config.loss).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {}: {m}", batch_idx + 1)),
                other => other,
            })?;
            if !value.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {}", batch_idx + 1)));
            }
            loss_sum += value.total * batch.len() as f64;

            grads.visit_mut(&mut |t| t.fill(0.0));
            for (k, &i) in batch.iter().enumerate() {
                model.backward(&train_set[i].0, &caches[k], d_logits.row(k), &mut grads)?;
            }
            let grad_refs = grads.params();
            optimizer.step(&mut model.params_mut(), &grad_refs)?;
        }
        if model.params().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }

        let val_accuracy = accuracy(&model, &val_set)?;
        trace.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
            wall_time: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        config: config.clone(),
        classes,
        vocab,
        best_epoch,
        model: best_model,
    };
    Ok((checkpoint, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    pub normalized: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(checkpoint: &Checkpoint, examples: &[LabeledExample]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut confusion = ConfusionMatrix::new(checkpoint.classes)?;
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.label >= checkpoint.classes {
            return Err(Error::LabelOutOfRange {
                label: ex.label,
                classes: checkpoint.classes,
            });
        }
        let tokens = tokenize(&ex.text, &checkpoint.vocab, checkpoint.config.max_seq_len)?;
        let pred = argmax(&checkpoint.model.logits(&tokens)?);
        confusion.accumulate(ex.label, pred)?;
        predictions.push(pred);
    }
    Ok(Evaluation {
        report: confusion.compute_metrics()?,
        normalized: confusion.normalize_rows()?,
        confusion,
        predictions,
    })
}
