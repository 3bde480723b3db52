use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphBatch, PretrainHead, SgeModel};
use crate::data::{class_counts, compute_metrics, AccidentClass, MetricsReport, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numkit::{Optimizer, OptimizerKind, Tape};
use crate::report::write_csv;
use crate::rng::{derive_seed, XorShiftRng};
use crate::scene_graph::TemporalGraphSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 32,
            optimizer: OptimizerKind::adam(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Encoder from the epoch with the lowest validation loss.
    pub model: SgeModel,
    /// Classifier that was trained alongside the selected encoder.
    pub head: PretrainHead,
    pub curve: Vec<PretrainEpoch>,
    /// 1-based epoch of the selected checkpoint; 0 when no epoch ran.
    pub best_epoch: usize,
}

impl PretrainOutcome {
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.curve)
    }

    /// Metrics of the selected encoder and its pretraining classifier.
    pub fn metrics(&self, seqs: &[TemporalGraphSequence]) -> Result<MetricsReport> {
        let (_, preds) = evaluate(&self.model, &self.head, seqs, 256)?;
        let labels: Vec<usize> = seqs.iter().map(|s| s.label.index()).collect();
        compute_metrics(&preds, &labels)
    }
}

fn labels_of(seqs: &[&TemporalGraphSequence]) -> Vec<usize> {
    seqs.iter().map(|s| s.label.index()).collect()
}

/// Mean cross-entropy and predictions of the frozen encoder and head.
pub(crate) fn evaluate(
    model: &SgeModel,
    head: &PretrainHead,
    seqs: &[TemporalGraphSequence],
    chunk: usize,
) -> Result<(f64, Vec<usize>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&TemporalGraphSequence> = part.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let emb = bound.forward(&mut tape, &GraphBatch::new(&refs)?)?;
        let logits = head.logits(&mut tape, emb, false)?;
        let loss = tape.softmax_cross_entropy(logits, &labels_of(&refs))?;
        total += tape.value(loss).item() * part.len() as f64;
        let values = tape.value(logits);
        preds.extend((0..part.len()).map(|i| crate::fusion::argmax(values.row_slice(i))));
    }
    Ok((total / seqs.len() as f64, preds))
}

/// Supervised pretraining of the encoder on the four-class task with a
/// linear classifier on the clip embedding. Returns the encoder with the
/// lowest validation loss; with an empty validation set the training loss
/// is used for selection instead.
pub fn sge_pretrain(
    train: &[TemporalGraphSequence],
    val: &[TemporalGraphSequence],
    mut model: SgeModel,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretraining batch_size must be positive".into()));
    }
    let counts = class_counts(&train.iter().map(|s| s.label).collect::<Vec<_>>());
    if let Some(k) = (0..NUM_CLASSES).find(|&k| counts[k] == 0) {
        return Err(Error::Config(format!(
            "pretraining split has no clips of class {}",
            AccidentClass::ALL[k]
        )));
    }
    let mut rng = XorShiftRng::new(derive_seed(seed, "sge_pretrain"));
    let mut head = PretrainHead::new(model.d_clip(), &mut rng);
    let mut opt_model = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut opt_head = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    model.store.zero_grad();
    head.store.zero_grad();

    let mut best = (f64::INFINITY, model.clone(), head.clone(), 0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&TemporalGraphSequence> = idx.iter().map(|&i| &train[i]).collect();
            let batch = GraphBatch::new(&refs)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let emb = bound.forward(&mut tape, &batch)?;
            let logits = head.logits(&mut tape, emb, true)?;
            let loss = tape.softmax_cross_entropy(logits, &labels_of(&refs))?;
            epoch_loss += tape.value(loss).item() * refs.len() as f64;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut model.store);
            grads.accumulate_into(&mut head.store);
            opt_model.step(&mut model.store)?;
            opt_head.step(&mut head.store)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_bacc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (loss, preds) = evaluate(&model, &head, val, 256)?;
            let labels: Vec<usize> = val.iter().map(|s| s.label.index()).collect();
            (loss, compute_metrics(&preds, &labels)?.balanced_accuracy)
        };
        let selection = if val.is_empty() { train_loss } else { val_loss };
        if selection < best.0 {
            best = (selection, model.clone(), head.clone(), epoch);
        }
        curve.push(PretrainEpoch {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_bacc,
        });
    }
    let (_, model, head, best_epoch) = best;
    Ok(PretrainOutcome {
        model,
        head,
        curve,
        best_epoch,
    })
}
