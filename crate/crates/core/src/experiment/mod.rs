//! End-to-end runs: data, scene graphs, encoder pretraining, alignment,
//! fusion head and evaluation, plus the grid over settings.
//!
//! Every stage is a free function so the CLI can run them one at a time
//! through checkpoints in an output directory, while `run_experiment`
//! chains them in memory. Both paths write the same artifact names.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::alignment::{align_train, AlignEpoch, AlignmentModel};
use crate::config::{PretrainSource, ProviderSource, RunConfig, Setting};
use crate::data::{
    compute_metrics, generate_synthetic_dataset, load_annotations, split_indices, DetectionClip, DomainShift,
    MetricsReport, GENERIC_CAPTION,
};
use crate::encoder::{sge_embed_all, sge_pretrain, PretrainEpoch, SgeModel};
use crate::error::{Error, Result};
use crate::fusion::{
    argmax, fuse, head_forward, predict, train_head, write_predictions, ClassifierHead, FusedExample, HeadEpoch,
    ModalityMask, Prediction, PredictionRow,
};
use crate::providers::{EmbeddingProvider, FileProvider, SyntheticProvider};
use crate::report::{write_csv, write_json};
use crate::rng::{derive_seed, XorShiftRng};
use crate::scene_graph::{build_sequence, FrameStats, GraphDump, SceneGraphBuilder, TemporalGraphSequence};

/// Rows per forward chunk when embedding whole splits.
pub const EMBED_CHUNK: usize = 64;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SHIFTED_ANNOTATIONS_FILE: &str = "annotations_shifted.jsonl";
pub const GRAPHS_FILE: &str = "graphs.jsonl";
pub const SGE_CHECKPOINT: &str = "sge.ckpt";
pub const ALIGN_CHECKPOINT: &str = "align.ckpt";
pub const HEAD_CHECKPOINT: &str = "head.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Main-distribution clips of a run: synthetic under the run seed, or the
/// configured annotation file.
pub fn main_clips(cfg: &RunConfig, seed: u64) -> Result<Vec<DetectionClip>> {
    match &cfg.experiment.annotations {
        Some(path) => load_annotations(path),
        None => generate_synthetic_dataset(
            &cfg.data,
            &cfg.scene_graph.calibration(),
            derive_seed(seed, "main_data"),
        ),
    }
}

/// Clips of the shifted source domain used for transfer pretraining.
pub fn shifted_clips(cfg: &RunConfig, seed: u64) -> Result<Vec<DetectionClip>> {
    let mut gen = cfg.data.clone();
    gen.domain_shift = DomainShift::Shifted;
    gen.n_clips = cfg.experiment.shifted_clips.unwrap_or(cfg.data.n_clips);
    generate_synthetic_dataset(&gen, &cfg.scene_graph.calibration(), derive_seed(seed, "shifted_data"))
}

pub fn build_sequences(
    clips: &[DetectionClip],
    cfg: &RunConfig,
) -> Result<Vec<(TemporalGraphSequence, FrameStats)>> {
    let builder = SceneGraphBuilder::new(&cfg.scene_graph)?;
    clips.iter().map(|c| build_sequence(c, &builder)).collect()
}

pub fn graph_dumps(seqs: &[(TemporalGraphSequence, FrameStats)]) -> Vec<GraphDump> {
    seqs.iter().map(|(s, st)| GraphDump::new(s, *st)).collect()
}

/// Sequences partitioned into stratified train/validation/test splits.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<TemporalGraphSequence>,
    pub val: Vec<TemporalGraphSequence>,
    pub test: Vec<TemporalGraphSequence>,
}

impl SplitData {
    pub fn new(seqs: Vec<TemporalGraphSequence>, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let labels: Vec<_> = seqs.iter().map(|s| s.label).collect();
        let idx = split_indices(&labels, ratios, seed)?;
        let pick = |ids: &[usize]| ids.iter().map(|&i| seqs[i].clone()).collect();
        Ok(SplitData {
            train: pick(&idx.train),
            val: pick(&idx.val),
            test: pick(&idx.test),
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &TemporalGraphSequence> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Scene-graph sequences of the main data, split under the run seed.
pub fn main_split(cfg: &RunConfig, seed: u64, clips: &[DetectionClip]) -> Result<SplitData> {
    let seqs = build_sequences(clips, cfg)?.into_iter().map(|(s, _)| s).collect();
    SplitData::new(seqs, cfg.experiment.split_ratios, derive_seed(seed, "split"))
}

pub fn make_provider<'a>(
    cfg: &RunConfig,
    clips: impl IntoIterator<Item = &'a TemporalGraphSequence>,
) -> Result<Box<dyn EmbeddingProvider>> {
    let p = &cfg.providers;
    match p.source {
        ProviderSource::Synthetic => Ok(Box::new(SyntheticProvider::new(
            p.synthetic.clone(),
            clips.into_iter().map(|s| (s.clip_id.as_str(), s.label)),
        )?)),
        ProviderSource::Files => {
            let (Some(text), Some(video)) = (&p.text_table, &p.video_table) else {
                return Err(Error::Config("file provider needs text_table and video_table".into()));
            };
            Ok(Box::new(FileProvider::load(text, video)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainStage {
    pub source: &'static str,
    pub curve: Vec<PretrainEpoch>,
    pub best_epoch: usize,
}

pub fn fresh_encoder(cfg: &RunConfig, seed: u64) -> Result<SgeModel> {
    SgeModel::new(cfg.sge.clone(), &mut XorShiftRng::new(derive_seed(seed, "sge_init")))
}

/// Pretrain `model` as the setting asks: shifted data first (own split),
/// then the main training split.
pub fn pretrain_encoder(
    cfg: &RunConfig,
    seed: u64,
    source: PretrainSource,
    main: &SplitData,
    mut model: SgeModel,
) -> Result<(SgeModel, Vec<PretrainStage>)> {
    let mut stages = Vec::new();
    if source.uses_shifted() {
        let shifted = main_split_of(cfg, seed, &shifted_clips(cfg, seed)?)?;
        let out = sge_pretrain(&shifted.train, &shifted.val, model, &cfg.pretrain, derive_seed(seed, "pretrain_shifted"))?;
        stages.push(PretrainStage {
            source: "shifted",
            curve: out.curve,
            best_epoch: out.best_epoch,
        });
        model = out.model;
    }
    if source.uses_main() {
        let out = sge_pretrain(&main.train, &main.val, model, &cfg.pretrain, derive_seed(seed, "pretrain_main"))?;
        stages.push(PretrainStage {
            source: "main",
            curve: out.curve,
            best_epoch: out.best_epoch,
        });
        model = out.model;
    }
    Ok((model, stages))
}

fn main_split_of(cfg: &RunConfig, seed: u64, clips: &[DetectionClip]) -> Result<SplitData> {
    let seqs = build_sequences(clips, cfg)?.into_iter().map(|(s, _)| s).collect();
    SplitData::new(seqs, cfg.experiment.split_ratios, derive_seed(seed, "shifted_split"))
}

pub fn align_encoder(
    cfg: &RunConfig,
    seed: u64,
    train: &[TemporalGraphSequence],
    provider: &dyn EmbeddingProvider,
    sge: SgeModel,
) -> Result<(AlignmentModel, Vec<AlignEpoch>)> {
    let mut rng = XorShiftRng::new(derive_seed(seed, "align_init"));
    let model = AlignmentModel::new(sge, provider.dim(), cfg.alignment.logit_scale_init, &mut rng)?;
    let out = align_train(train, provider, model, &cfg.alignment, derive_seed(seed, "align"))?;
    Ok((out.model, out.curve))
}

/// Graph side of the fused features.
#[derive(Debug, Clone)]
pub enum GraphEncoder {
    None,
    /// Raw clip embedding of a pretrained encoder.
    Unaligned(SgeModel),
    /// Projected, unit-norm embedding in the provider space.
    Aligned(AlignmentModel),
}

impl GraphEncoder {
    pub fn embed(&self, seqs: &[TemporalGraphSequence]) -> Result<Option<Vec<Vec<f64>>>> {
        match self {
            GraphEncoder::None => Ok(None),
            GraphEncoder::Unaligned(m) => sge_embed_all(seqs, m, EMBED_CHUNK).map(Some),
            GraphEncoder::Aligned(m) => m.embed_all(seqs, EMBED_CHUNK).map(Some),
        }
    }

    pub fn mask(&self) -> ModalityMask {
        match self {
            GraphEncoder::None => ModalityMask::NO_GRAPH,
            _ => ModalityMask::ALL,
        }
    }
}

/// Fused head inputs; the text part always comes from the generic caption.
pub fn fused_examples(
    cfg: &RunConfig,
    seqs: &[TemporalGraphSequence],
    encoder: &GraphEncoder,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<FusedExample>> {
    let graphs = encoder.embed(seqs)?;
    let text = provider.text_embed(GENERIC_CAPTION)?;
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let g = graphs.as_ref().map(|g| g[i].as_slice());
            let v = provider.video_embed(&s.clip_id)?;
            Ok(FusedExample {
                clip_id: s.clip_id.clone(),
                text_key: GENERIC_CAPTION.to_string(),
                features: fuse(g, &v, &text, cfg.head.strategy, encoder.mask())?,
                label: s.label.index(),
            })
        })
        .collect()
}

/// Metrics and per-clip predictions of a trained head.
pub fn evaluate_head(head: &ClassifierHead, examples: &[FusedExample]) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    let rows = examples
        .iter()
        .map(|e| {
            let logits = head_forward(&e.features, head)?;
            let p = Prediction {
                class: argmax(&logits),
                logits,
            };
            Ok(PredictionRow::new(&e.clip_id, e.label, &p))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = rows.iter().map(|r| r.pred).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.truth).collect();
    Ok((compute_metrics(&preds, &labels)?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Outcome of one run; embeds the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub setting: Setting,
    pub seed: u64,
    pub split: SplitSizes,
    pub stages: Vec<StageSummary>,
    pub logit_scale: Option<f64>,
    pub metrics: SplitMetrics,
    pub config: RunConfig,
}

fn summary<T>(stage: &str, curve: &[T], best: Option<usize>, loss: impl Fn(&T) -> f64) -> StageSummary {
    StageSummary {
        stage: stage.to_string(),
        epochs: curve.len(),
        best_epoch: best,
        first_loss: curve.first().map(&loss),
        final_loss: curve.last().map(&loss),
    }
}

/// Execute every stage the configured setting needs and, when `out_dir` is
/// given, write the report, curves, checkpoints and test predictions.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let setting = cfg.experiment.setting;
    let seed = cfg.experiment.seed;
    let out = |name: &str| out_dir.map(|d| d.join(name));
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let clips = main_clips(cfg, seed)?;
    let data = main_split(cfg, seed, &clips)?;
    let provider = make_provider(cfg, data.all())?;
    let mut stages = Vec::new();

    let encoder = if setting.uses_graph() {
        let (sge, pretrain) = pretrain_encoder(cfg, seed, setting.pretrain(), &data, fresh_encoder(cfg, seed)?)?;
        for p in &pretrain {
            let name = format!("pretrain_{}", p.source);
            if let Some(path) = out(&format!("{name}.csv")) {
                write_csv(&path, &p.curve)?;
            }
            stages.push(summary(&name, &p.curve, Some(p.best_epoch), |e| e.train_loss));
        }
        if let Some(path) = out(SGE_CHECKPOINT) {
            sge.save(&path)?;
        }
        if setting.aligns() {
            let (model, curve) = align_encoder(cfg, seed, &data.train, provider.as_ref(), sge)?;
            if let Some(path) = out("align.csv") {
                write_csv(&path, &curve)?;
            }
            if let Some(path) = out(ALIGN_CHECKPOINT) {
                model.save(&path)?;
            }
            stages.push(summary("align", &curve, None, |e| e.total));
            GraphEncoder::Aligned(model)
        } else {
            GraphEncoder::Unaligned(sge)
        }
    } else {
        GraphEncoder::None
    };

    let (report, _) = finish(cfg, &data, &encoder, provider.as_ref(), stages, out_dir)?;
    Ok(report)
}

/// Head training and evaluation shared by the full run and the CLI stages.
pub fn finish(
    cfg: &RunConfig,
    data: &SplitData,
    encoder: &GraphEncoder,
    provider: &dyn EmbeddingProvider,
    mut stages: Vec<StageSummary>,
    out_dir: Option<&Path>,
) -> Result<(ExperimentReport, ClassifierHead)> {
    let seed = cfg.experiment.seed;
    let train = fused_examples(cfg, &data.train, encoder, provider)?;
    let val = fused_examples(cfg, &data.val, encoder, provider)?;
    let test = fused_examples(cfg, &data.test, encoder, provider)?;
    let head = train_head(&train, &val, &cfg.head, derive_seed(seed, "head"))?;
    stages.push(summary("head", &head.curve, Some(head.best_epoch), |e: &HeadEpoch| e.train_loss));
    let (train_m, _) = evaluate_head(&head.head, &train)?;
    let (val_m, _) = evaluate_head(&head.head, &val)?;
    let (test_m, rows) = evaluate_head(&head.head, &test)?;
    let report = ExperimentReport {
        setting: cfg.experiment.setting,
        seed,
        split: SplitSizes {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        },
        stages,
        logit_scale: match encoder {
            GraphEncoder::Aligned(m) => Some(m.logit_scale()),
            _ => None,
        },
        metrics: SplitMetrics {
            train: train_m,
            val: val_m,
            test: test_m,
        },
        config: cfg.clone(),
    };
    if let Some(d) = out_dir {
        head.write_curve(&d.join("head.csv"))?;
        head.head.save(&d.join(HEAD_CHECKPOINT))?;
        write_predictions(&d.join(PREDICTIONS_FILE), &rows)?;
        write_json(&d.join(REPORT_FILE), &report)?;
    }
    Ok((report, head.head))
}

/// Test-split prediction with an already trained encoder and head.
pub fn predict_split(
    cfg: &RunConfig,
    seqs: &[TemporalGraphSequence],
    encoder: &GraphEncoder,
    provider: &dyn EmbeddingProvider,
    head: &ClassifierHead,
) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    let graphs = encoder.embed(seqs)?;
    let text = provider.text_embed(GENERIC_CAPTION)?;
    let rows = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = provider.video_embed(&s.clip_id)?;
            let g = graphs.as_ref().map(|g| g[i].as_slice());
            let p = predict(g, &v, &text, head, cfg.head.strategy, encoder.mask())?;
            Ok(PredictionRow::new(&s.clip_id, s.label.index(), &p))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = rows.iter().map(|r| r.pred).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.truth).collect();
    Ok((compute_metrics(&preds, &labels)?, rows))
}

/// One row of the grid summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: String,
    pub setting: Setting,
    pub seed: u64,
    pub align_batch_size: Option<usize>,
    pub align_epochs: Option<usize>,
    pub test_accuracy: f64,
    pub test_balanced_accuracy: f64,
}

/// Resolved configurations of every grid cell, in execution order.
/// Settings that skip alignment get one cell per seed.
pub fn grid_cells(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let g = &cfg.grid;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let settings = if g.settings.is_empty() { Setting::grid() } else { g.settings.clone() };
    let seeds = if g.seeds.is_empty() { vec![cfg.experiment.seed] } else { g.seeds.clone() };
    let batch_sizes = or(&g.batch_sizes, cfg.alignment.batch_size);
    let epochs = or(&g.epochs, cfg.alignment.epochs);
    let mut cells = Vec::new();
    for setting in settings {
        let axes: Vec<(usize, usize)> = if setting.aligns() {
            batch_sizes.iter().flat_map(|&b| epochs.iter().map(move |&e| (b, e))).collect()
        } else {
            vec![(cfg.alignment.batch_size, cfg.alignment.epochs)]
        };
        for &(b, e) in &axes {
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.experiment.setting = setting;
                c.experiment.seed = seed;
                c.alignment.batch_size = b;
                c.alignment.epochs = e;
                let name = if setting.aligns() {
                    format!("{}_bs{b}_ep{e}_seed{seed}", setting.slug())
                } else {
                    format!("{}_seed{seed}", setting.slug())
                };
                cells.push((name, c));
            }
        }
    }
    cells
}

/// Run every cell sequentially into `out_dir/<cell>/` and write
/// `grid.json` and `grid.csv` summaries. All cells are validated first.
pub fn run_grid(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<GridRow>> {
    let cells = grid_cells(cfg);
    for (_, c) in &cells {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (name, c) in &cells {
        let dir: PathBuf = out_dir.join(name);
        let report = run_experiment(c, Some(&dir))?;
        let aligns = c.experiment.setting.aligns();
        rows.push(GridRow {
            cell: name.clone(),
            setting: c.experiment.setting,
            seed: c.experiment.seed,
            align_batch_size: aligns.then_some(c.alignment.batch_size),
            align_epochs: aligns.then_some(c.alignment.epochs),
            test_accuracy: report.metrics.test.accuracy,
            test_balanced_accuracy: report.metrics.test.balanced_accuracy,
        });
    }
    write_json(&out_dir.join("grid.json"), &rows)?;
    write_csv(&out_dir.join("grid.csv"), &rows)?;
    Ok(rows)
}
