//! Contrastive alignment of the graph embedding space with the frozen
//! video and text spaces.
//!
//! Only the graph side is trainable: the encoder, a projection into the
//! provider space and the logit scale. Video and text pass through
//! unchanged, so the video-text term is reported but carries no gradient.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{caption, CaptionStyle};
use crate::encoder::{GraphBatch, SgeConfig, SgeModel};
use crate::error::{Error, Result};
use crate::numkit::{checkpoint, Optimizer, OptimizerKind, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::providers::EmbeddingProvider;
use crate::report::write_csv;
use crate::rng::{derive_seed, XorShiftRng};
use crate::scene_graph::TemporalGraphSequence;

/// Tolerance on row norms accepted by the contrastive loss.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Initial log of the similarity scale.
    pub logit_scale_init: f64,
    /// Bounds on the similarity scale itself (not its log).
    pub scale_bounds: [f64; 2],
    pub caption_style: CaptionStyle,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::adam(),
            logit_scale_init: 2.66,
            scale_bounds: [1.0, 100.0],
            caption_style: CaptionStyle::B,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "alignment batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        let [lo, hi] = self.scale_bounds;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid scale bounds {:?}", self.scale_bounds)));
        }
        if !self.logit_scale_init.is_finite() {
            return Err(Error::Config("logit_scale_init must be finite".into()));
        }
        Ok(())
    }

    fn log_bounds(&self) -> (f64, f64) {
        (self.scale_bounds[0].ln(), self.scale_bounds[1].ln())
    }
}

fn check_unit_rows(tape: &Tape, v: Var, name: &str) -> Result<()> {
    let t = tape.value(v);
    let (rows, _) = t
        .dims2()
        .ok_or_else(|| Error::Contract(format!("{name} must be a matrix, got {:?}", t.shape())))?;
    for r in 0..rows {
        let n = t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{name} row {r} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

/// Symmetric cross-entropy over `S = exp(logit_scale) · A Bᵀ` with the
/// diagonal as targets: `½ [CE(rows of S) + CE(columns of S)]`.
pub fn pairwise_contrastive_loss(tape: &mut Tape, a: Var, b: Var, logit_scale: Var) -> Result<Var> {
    check_unit_rows(tape, a, "A")?;
    check_unit_rows(tape, b, "B")?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim("pairwise_contrastive_loss", tape.shape(a), tape.shape(b)));
    }
    if tape.value(logit_scale).numel() != 1 {
        return Err(Error::Contract("logit_scale must be a single value".into()));
    }
    let n = tape.shape(a)[0];
    let bt = tape.transpose(b)?;
    let sim = tape.matmul(a, bt)?;
    let scale = tape.exp(logit_scale)?;
    let s = tape.mul(sim, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let rows = tape.softmax_cross_entropy(s, &targets)?;
    let st = tape.transpose(s)?;
    let cols = tape.softmax_cross_entropy(st, &targets)?;
    let both = tape.add(rows, cols)?;
    tape.scale(both, 0.5)
}

/// Value-only form of [`pairwise_contrastive_loss`].
pub fn contrastive_loss(a: &Tensor, b: &Tensor, logit_scale: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let s = tape.constant(Tensor::scalar(logit_scale));
    let loss = pairwise_contrastive_loss(&mut tape, a, b, s)?;
    Ok(tape.value(loss).item())
}

/// Encoder plus graph-side projection and temperature.
#[derive(Debug, Clone)]
pub struct AlignmentModel {
    pub sge: SgeModel,
    pub store: ParameterStore,
    projection: ParamId,
    logit_scale: ParamId,
    d_shared: usize,
}

impl AlignmentModel {
    pub fn new(sge: SgeModel, d_shared: usize, logit_scale_init: f64, rng: &mut XorShiftRng) -> Result<Self> {
        if d_shared == 0 {
            return Err(Error::Config("shared embedding dim must be positive".into()));
        }
        let mut store = ParameterStore::new();
        let projection = store.add_glorot("align.projection", sge.d_clip(), d_shared, rng);
        let logit_scale = store.add("align.logit_scale", Tensor::scalar(logit_scale_init));
        Ok(AlignmentModel {
            sge,
            store,
            projection,
            logit_scale,
            d_shared,
        })
    }

    pub fn d_shared(&self) -> usize {
        self.d_shared
    }

    pub fn logit_scale(&self) -> f64 {
        self.store.value(self.logit_scale).item()
    }

    /// `d_clip x d_shared` graph projection.
    pub fn projection(&self) -> &Tensor {
        self.store.value(self.projection)
    }

    pub fn projection_mut(&mut self) -> &mut Tensor {
        self.store.value_mut(self.projection)
    }

    fn clamp_scale(&mut self, lo: f64, hi: f64) {
        let v = self.store.value_mut(self.logit_scale);
        v.data_mut()[0] = v.data()[0].clamp(lo, hi);
    }

    /// Unit-norm projected graph embeddings (`clips x d_shared`).
    pub fn graph_embed(&self, tape: &mut Tape, batch: &GraphBatch, trainable: bool) -> Result<Var> {
        let bound = self.sge.bind(tape, trainable);
        let clip = bound.forward(tape, batch)?;
        let p = if trainable {
            tape.param(&self.store, self.projection)
        } else {
            tape.frozen(&self.store, self.projection)
        };
        let z = tape.matmul(clip, p)?;
        tape.l2_normalize(z)
    }

    /// Frozen projected embeddings of many clips.
    pub fn embed_all(&self, seqs: &[TemporalGraphSequence], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let refs: Vec<&TemporalGraphSequence> = part.iter().collect();
            let mut tape = Tape::new();
            let emb = self.graph_embed(&mut tape, &GraphBatch::new(&refs)?, false)?;
            let value = tape.value(emb);
            out.extend((0..part.len()).map(|i| value.row_slice(i).to_vec()));
        }
        Ok(out)
    }

    /// Single checkpoint holding encoder and alignment parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = ParameterStore::new();
        all.extend_prefixed("sge.", &self.sge.store);
        all.extend_prefixed("", &self.store);
        checkpoint::save(&all, path)
    }

    pub fn load(sge_config: SgeConfig, d_shared: usize, path: &Path) -> Result<Self> {
        let all = checkpoint::load(path)?;
        let mut rng = XorShiftRng::new(0);
        let mut sge = SgeModel::new(sge_config, &mut rng)?;
        sge.store.load_values_from(&all.strip_prefix("sge."))?;
        let mut model = AlignmentModel::new(sge, d_shared, 0.0, &mut rng)?;
        model.store.load_values_from(&all)?;
        Ok(model)
    }
}

/// Clips with their frozen video and text embeddings.
#[derive(Debug, Clone)]
pub struct AlignmentBatch<'a> {
    pub seqs: Vec<&'a TemporalGraphSequence>,
    pub video: Tensor,
    pub text: Tensor,
}

impl<'a> AlignmentBatch<'a> {
    /// Look up embeddings: video by clip id, text by the clip's class
    /// caption in `style`.
    pub fn assemble(seqs: Vec<&'a TemporalGraphSequence>, provider: &dyn EmbeddingProvider, style: CaptionStyle) -> Result<Self> {
        let d = provider.dim();
        let mut video = Vec::with_capacity(seqs.len() * d);
        let mut text = Vec::with_capacity(seqs.len() * d);
        for s in &seqs {
            video.extend(provider.video_embed(&s.clip_id)?);
            text.extend(provider.text_embed(caption(style, s.label))?);
        }
        let n = seqs.len();
        Ok(AlignmentBatch {
            seqs,
            video: Tensor::new(vec![n, d], video)?,
            text: Tensor::new(vec![n, d], text)?,
        })
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(s) = self.seqs.iter().find(|s| !seen.insert(s.clip_id.as_str())) {
            return Err(Error::Contract(format!(
                "clip {} appears twice in one alignment batch",
                s.clip_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub vg: f64,
    pub tg: f64,
    pub vt: f64,
    pub total: f64,
}

/// Pair losses recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PairLosses {
    pub vg: Var,
    pub tg: Var,
    /// Uses a detached scale and frozen inputs, so it never has a gradient.
    pub vt: Var,
    pub total: Var,
}

/// Record the three pair losses of a batch on `tape`.
pub fn alignment_losses(
    tape: &mut Tape,
    graphs: &GraphBatch,
    video: &Tensor,
    text: &Tensor,
    model: &AlignmentModel,
    trainable: bool,
) -> Result<PairLosses> {
    let g = model.graph_embed(tape, graphs, trainable)?;
    let v = tape.constant(video.clone());
    let t = tape.constant(text.clone());
    let scale = if trainable {
        tape.param(&model.store, model.logit_scale)
    } else {
        tape.frozen(&model.store, model.logit_scale)
    };
    let scale_fixed = tape.frozen(&model.store, model.logit_scale);
    let vg = pairwise_contrastive_loss(tape, v, g, scale)?;
    let tg = pairwise_contrastive_loss(tape, t, g, scale)?;
    let vt = pairwise_contrastive_loss(tape, v, t, scale_fixed)?;
    let sum = tape.add(vg, tg)?;
    let total = tape.add(sum, vt)?;
    Ok(PairLosses { vg, tg, vt, total })
}

/// One forward and backward pass; gradients are added to the encoder and
/// alignment stores. Returns the three pair losses and their sum.
pub fn align_step(batch: &AlignmentBatch, model: &mut AlignmentModel) -> Result<StepLosses> {
    batch.check()?;
    let graphs = GraphBatch::new(&batch.seqs)?;
    let mut tape = Tape::new();
    let l = alignment_losses(&mut tape, &graphs, &batch.video, &batch.text, model, true)?;
    let losses = StepLosses {
        vg: tape.value(l.vg).item(),
        tg: tape.value(l.tg).item(),
        vt: tape.value(l.vt).item(),
        total: tape.value(l.total).item(),
    };
    let grads = tape.backward(l.total)?;
    grads.accumulate_into(&mut model.sge.store);
    grads.accumulate_into(&mut model.store);
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignEpoch {
    pub epoch: usize,
    pub vg_loss: f64,
    pub tg_loss: f64,
    pub vt_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub model: AlignmentModel,
    pub curve: Vec<AlignEpoch>,
}

impl AlignOutcome {
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.curve)
    }
}

/// Shuffled mini-batch alignment; the ragged final batch of each epoch is
/// dropped. Curve entries are mean batch losses per epoch.
pub fn align_train(
    train: &[TemporalGraphSequence],
    provider: &dyn EmbeddingProvider,
    mut model: AlignmentModel,
    cfg: &AlignmentConfig,
    seed: u64,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "alignment needs at least batch_size={} clips, got {}",
            cfg.batch_size,
            train.len()
        )));
    }
    if model.d_shared != provider.dim() {
        return Err(Error::dim("alignment projection", &[model.d_shared], &[provider.dim()]));
    }
    let (lo, hi) = cfg.log_bounds();
    model.clamp_scale(lo, hi);
    let mut rng = XorShiftRng::new(derive_seed(seed, "align_train"));
    let mut opt_sge = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut opt_align = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    model.sge.store.zero_grad();
    model.store.zero_grad();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for idx in order.chunks_exact(cfg.batch_size) {
            let seqs = idx.iter().map(|&i| &train[i]).collect();
            let batch = AlignmentBatch::assemble(seqs, provider, cfg.caption_style)?;
            let l = align_step(&batch, &mut model)?;
            opt_sge.step(&mut model.sge.store)?;
            opt_align.step(&mut model.store)?;
            model.clamp_scale(lo, hi);
            for (s, v) in sums.iter_mut().zip([l.vg, l.tg, l.vt, l.total]) {
                *s += v;
            }
            batches += 1;
        }
        let m = |k: usize| sums[k] / batches as f64;
        curve.push(AlignEpoch {
            epoch,
            vg_loss: m(0),
            tg_loss: m(1),
            vt_loss: m(2),
            total: m(3),
        });
    }
    Ok(AlignOutcome { model, curve })
}
