//! Late fusion of graph, video and text embeddings and the classification
//! head trained on top of them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{compute_metrics, GENERIC_CAPTION, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numkit::{checkpoint, Optimizer, OptimizerKind, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::report::write_csv;
use crate::rng::{derive_seed, XorShiftRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Concatenate in the order graph, video, text.
    Concat,
    WeightedSum { weights: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub graph: bool,
    pub video: bool,
    pub text: bool,
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        graph: true,
        video: true,
        text: true,
    };
    /// Video and text only: the ablation without the graph encoder.
    pub const NO_GRAPH: ModalityMask = ModalityMask {
        graph: false,
        video: true,
        text: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.graph || self.video || self.text {
            Ok(())
        } else {
            Err(Error::Config("modality mask excludes every modality".into()))
        }
    }
}

/// Fuse the unmasked modalities. `g` may be `None` only when the mask
/// excludes the graph.
pub fn fuse(g: Option<&[f64]>, v: &[f64], t: &[f64], strategy: FusionStrategy, mask: ModalityMask) -> Result<Vec<f64>> {
    mask.validate()?;
    let g = match (mask.graph, g) {
        (true, Some(g)) => Some(g),
        (true, None) => return Err(Error::Contract("graph modality requested but no graph embedding given".into())),
        (false, _) => None,
    };
    let parts: Vec<(&[f64], f64)> = [
        g.map(|x| (x, 0)),
        mask.video.then_some((v, 1)),
        mask.text.then_some((t, 2)),
    ]
    .into_iter()
    .flatten()
    .map(|(x, k)| match strategy {
        FusionStrategy::Concat => (x, 1.0),
        FusionStrategy::WeightedSum { weights } => (x, weights[k]),
    })
    .collect();
    match strategy {
        FusionStrategy::Concat => Ok(parts.iter().flat_map(|(x, _)| x.iter().copied()).collect()),
        FusionStrategy::WeightedSum { weights } => {
            if weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Config(format!("fusion weights must be finite, got {weights:?}")));
            }
            let d = parts[0].0.len();
            if let Some((x, _)) = parts.iter().find(|(x, _)| x.len() != d) {
                return Err(Error::dim("weighted_sum fusion", &[d], &[x.len()]));
            }
            let mut out = vec![0.0; d];
            for (x, w) in &parts {
                for (o, xi) in out.iter_mut().zip(x.iter()) {
                    *o += w * xi;
                }
            }
            Ok(out)
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2` with four outputs.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub store: ParameterStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    d_in: usize,
}

impl ClassifierHead {
    pub fn new(d_in: usize, hidden: usize, rng: &mut XorShiftRng) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(Error::Config(format!("head sizes must be positive, got {d_in}x{hidden}")));
        }
        let mut store = ParameterStore::new();
        let w1 = store.add_glorot("head.w1", d_in, hidden, rng);
        let b1 = store.add_zeros("head.b1", &[hidden]);
        let w2 = store.add_glorot("head.w2", hidden, NUM_CLASSES, rng);
        let b2 = store.add_zeros("head.b2", &[NUM_CLASSES]);
        Ok(ClassifierHead { store, w1, b1, w2, b2, d_in })
    }

    /// Head with explicit weights, `w1` as `d_in x hidden` row-major.
    pub fn from_weights(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (d_in, hidden) = w1.dims2().ok_or_else(|| Error::Contract("w1 must be a matrix".into()))?;
        if b1.numel() != hidden || w2.shape() != [hidden, NUM_CLASSES] || b2.numel() != NUM_CLASSES {
            return Err(Error::dim("classifier head", w1.shape(), w2.shape()));
        }
        let mut store = ParameterStore::new();
        let w1 = store.add("head.w1", w1);
        let b1 = store.add("head.b1", b1.reshaped(&[hidden])?);
        let w2 = store.add("head.w2", w2);
        let b2 = store.add("head.b2", b2.reshaped(&[NUM_CLASSES])?);
        Ok(ClassifierHead { store, w1, b1, w2, b2, d_in })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.store.value(self.b1).numel()
    }

    /// Logits (`rows x 4`) of a batch of fused rows.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let mut bind = |id| {
            if trainable {
                tape.param(&self.store, id)
            } else {
                tape.frozen(&self.store, id)
            }
        };
        let (w1, b1, w2, b2) = (bind(self.w1), bind(self.b1), bind(self.w2), bind(self.b2));
        let z = tape.matmul(x, w1)?;
        let z = tape.add_bias(z, b1)?;
        let h = tape.relu(z)?;
        let z = tape.matmul(h, w2)?;
        tape.add_bias(z, b2)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = checkpoint::load(path)?;
        let get = |name: &str| {
            store.find(name).map(|id| store.value(id).clone()).ok_or_else(|| Error::MissingKey {
                key: name.into(),
                known: store.iter().map(|p| p.name.clone()).collect(),
            })
        };
        ClassifierHead::from_weights(get("head.w1")?, get("head.b1")?, get("head.w2")?, get("head.b2")?)
    }
}

pub fn head_forward(fused: &[f64], head: &ClassifierHead) -> Result<[f64; NUM_CLASSES]> {
    if fused.len() != head.d_in {
        return Err(Error::dim("head_forward", &[fused.len()], &[head.d_in]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(fused.to_vec()));
    let logits = head.forward(&mut tape, x, false)?;
    Ok(tape.value(logits).data().try_into().expect("four logits"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub logits: [f64; NUM_CLASSES],
}

pub fn predict(
    g: Option<&[f64]>,
    v: &[f64],
    t: &[f64],
    head: &ClassifierHead,
    strategy: FusionStrategy,
    mask: ModalityMask,
) -> Result<Prediction> {
    let logits = head_forward(&fuse(g, v, t, strategy, mask)?, head)?;
    Ok(Prediction {
        class: argmax(&logits),
        logits,
    })
}

/// One fused training example; `text_key` records which caption produced
/// the text part so the generic-caption rule can be enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedExample {
    pub clip_id: String,
    pub text_key: String,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Class-specific captions at fine-tuning time leak the label, so every
/// example must carry the generic caption.
pub fn check_generic_captions(examples: &[FusedExample]) -> Result<()> {
    match examples.iter().find(|e| e.text_key != GENERIC_CAPTION) {
        Some(e) => Err(Error::Contract(format!(
            "clip {} uses caption {:?}; head training and inference must use the generic caption",
            e.clip_id, e.text_key
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub strategy: FusionStrategy,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 128,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            optimizer: OptimizerKind::adam(),
            strategy: FusionStrategy::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub head: ClassifierHead,
    pub curve: Vec<HeadEpoch>,
    pub best_epoch: usize,
}

impl HeadOutcome {
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.curve)
    }
}

fn stack(examples: &[&FusedExample]) -> Result<Tensor> {
    let d = examples[0].features.len();
    if let Some(e) = examples.iter().find(|e| e.features.len() != d) {
        return Err(Error::dim("fused batch", &[d], &[e.features.len()]));
    }
    Tensor::new(
        vec![examples.len(), d],
        examples.iter().flat_map(|e| e.features.iter().copied()).collect(),
    )
}

/// Mean cross-entropy and predictions of a frozen head.
fn evaluate_head(head: &ClassifierHead, examples: &[FusedExample]) -> Result<(f64, Vec<usize>)> {
    let refs: Vec<&FusedExample> = examples.iter().collect();
    let mut tape = Tape::new();
    let x = tape.constant(stack(&refs)?);
    let logits = head.forward(&mut tape, x, false)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    let values = tape.value(logits);
    let preds = (0..examples.len()).map(|i| argmax(values.row_slice(i))).collect();
    Ok((tape.value(loss).item(), preds))
}

/// Train the head with softmax cross-entropy; keeps the epoch with the
/// lowest validation loss (training loss when `val` is empty). Encoders are
/// not involved: examples hold already-fused, frozen features.
pub fn train_head(train: &[FusedExample], val: &[FusedExample], cfg: &HeadConfig, seed: u64) -> Result<HeadOutcome> {
    if train.is_empty() {
        return Err(Error::Config("head training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("head batch_size must be positive".into()));
    }
    check_generic_captions(train)?;
    check_generic_captions(val)?;
    let mut rng = XorShiftRng::new(derive_seed(seed, "train_head"));
    let mut head = ClassifierHead::new(train[0].features.len(), cfg.hidden, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    head.store.zero_grad();
    let mut best = (f64::INFINITY, head.clone(), 0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut correct = 0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&FusedExample> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(stack(&refs)?);
            let logits = head.forward(&mut tape, x, true)?;
            let labels: Vec<usize> = refs.iter().map(|e| e.label).collect();
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            epoch_loss += tape.value(loss).item() * refs.len() as f64;
            let values = tape.value(logits);
            correct += (0..refs.len()).filter(|&i| argmax(values.row_slice(i)) == labels[i]).count();
            tape.backward(loss)?.accumulate_into(&mut head.store);
            opt.step(&mut head.store)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_bacc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (loss, preds) = evaluate_head(&head, val)?;
            let labels: Vec<usize> = val.iter().map(|e| e.label).collect();
            (loss, compute_metrics(&preds, &labels)?.balanced_accuracy)
        };
        let selection = if val.is_empty() { train_loss } else { val_loss };
        if selection < best.0 {
            best = (selection, head.clone(), epoch);
        }
        curve.push(HeadEpoch {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_balanced_accuracy: val_bacc,
        });
    }
    Ok(HeadOutcome {
        head: best.1,
        curve,
        best_epoch: best.2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub clip_id: String,
    #[serde(rename = "true")]
    pub truth: usize,
    pub pred: usize,
    pub logit_0: f64,
    pub logit_1: f64,
    pub logit_2: f64,
    pub logit_3: f64,
}

impl PredictionRow {
    pub fn new(clip_id: &str, truth: usize, p: &Prediction) -> Self {
        PredictionRow {
            clip_id: clip_id.to_string(),
            truth,
            pred: p.class,
            logit_0: p.logits[0],
            logit_1: p.logits[1],
            logit_2: p.logits[2],
            logit_3: p.logits[3],
        }
    }
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    write_csv(path, rows)
}
