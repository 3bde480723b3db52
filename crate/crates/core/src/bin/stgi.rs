use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use stgi::alignment::AlignmentModel;
use stgi::config::{RunConfig, Setting};
use stgi::data::{load_annotations, write_annotations, DetectionClip};
use stgi::encoder::SgeModel;
use stgi::experiment::{self as exp, GraphEncoder, SplitData};
use stgi::fusion::{write_predictions, ClassifierHead};
use stgi::report::{write_csv, write_json};

#[derive(Parser)]
#[command(name = "stgi", version, about = "Tri-modal traffic accident classification pipeline")]
struct Cli {
    /// Run configuration (TOML); defaults apply to missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact of the run.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic annotated clips.
    GenData,
    /// Build scene graphs and write a JSON Lines dump.
    BuildGraphs,
    /// Pretrain the scene graph encoder as the setting asks.
    PretrainSge,
    /// Align graph embeddings with the frozen video and text spaces.
    Align,
    /// Train the fusion head and write the run report.
    TrainHead,
    /// Evaluate saved checkpoints on the test split.
    Evaluate,
    /// Every stage of one setting in sequence.
    Run,
    /// Every cell of the configured grid.
    RunGrid,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    cfg.validate()?;
    let dir = cli.out_dir.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = cfg.experiment.seed;
    let setting = cfg.experiment.setting;

    match cli.command {
        Command::GenData => {
            let clips = exp::main_clips(&cfg, seed)?;
            write_annotations(&dir.join(exp::ANNOTATIONS_FILE), &clips)?;
            if setting.pretrain().uses_shifted() {
                write_annotations(&dir.join(exp::SHIFTED_ANNOTATIONS_FILE), &exp::shifted_clips(&cfg, seed)?)?;
            }
            std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
            println!("wrote {} clips to {}", clips.len(), dir.display());
        }
        Command::BuildGraphs => {
            let seqs = exp::build_sequences(&clips(&cfg, dir)?, &cfg)?;
            let path = dir.join(exp::GRAPHS_FILE);
            let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
            for dump in exp::graph_dumps(&seqs) {
                serde_json::to_writer(&mut out, &dump)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            println!("wrote {} graph sequences to {}", seqs.len(), path.display());
        }
        Command::PretrainSge => {
            if !setting.uses_graph() {
                bail!("setting {setting} does not use the scene graph encoder");
            }
            let data = split(&cfg, dir)?;
            let (model, stages) = exp::pretrain_encoder(&cfg, seed, setting.pretrain(), &data, exp::fresh_encoder(&cfg, seed)?)?;
            for s in &stages {
                write_csv(&dir.join(format!("pretrain_{}.csv", s.source)), &s.curve)?;
                let last = s.curve.last();
                println!(
                    "pretrain {}: best epoch {}, final val balanced accuracy {:.4}",
                    s.source,
                    s.best_epoch,
                    last.map_or(f64::NAN, |e| e.val_balanced_accuracy)
                );
            }
            model.save(&dir.join(exp::SGE_CHECKPOINT))?;
        }
        Command::Align => {
            if !setting.aligns() {
                bail!("setting {setting} skips alignment");
            }
            let data = split(&cfg, dir)?;
            let provider = exp::make_provider(&cfg, data.all())?;
            let sge_path = dir.join(exp::SGE_CHECKPOINT);
            let sge = if sge_path.exists() {
                SgeModel::load(cfg.sge.clone(), &sge_path)?
            } else {
                exp::fresh_encoder(&cfg, seed)?
            };
            let (model, curve) = exp::align_encoder(&cfg, seed, &data.train, provider.as_ref(), sge)?;
            write_csv(&dir.join("align.csv"), &curve)?;
            model.save(&dir.join(exp::ALIGN_CHECKPOINT))?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!("align: total loss {:.4} -> {:.4}", first.total, last.total);
            }
        }
        Command::TrainHead => {
            let data = split(&cfg, dir)?;
            let provider = exp::make_provider(&cfg, data.all())?;
            let encoder = load_encoder(&cfg, dir, provider.dim())?;
            let (report, _) = exp::finish(&cfg, &data, &encoder, provider.as_ref(), Vec::new(), Some(dir))?;
            print_metrics(setting, &report.metrics.test);
        }
        Command::Evaluate => {
            let data = split(&cfg, dir)?;
            let provider = exp::make_provider(&cfg, data.all())?;
            let encoder = load_encoder(&cfg, dir, provider.dim())?;
            let head = ClassifierHead::load(&dir.join(exp::HEAD_CHECKPOINT))?;
            let (metrics, rows) = exp::predict_split(&cfg, &data.test, &encoder, provider.as_ref(), &head)?;
            write_predictions(&dir.join(exp::PREDICTIONS_FILE), &rows)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            print_metrics(setting, &metrics);
        }
        Command::Run => {
            let report = exp::run_experiment(&cfg, Some(dir))?;
            print_metrics(setting, &report.metrics.test);
        }
        Command::RunGrid => {
            for row in exp::run_grid(&cfg, dir)? {
                println!(
                    "{:<40} accuracy {:.4}  balanced accuracy {:.4}",
                    row.cell, row.test_accuracy, row.test_balanced_accuracy
                );
            }
        }
    }
    Ok(())
}

/// Clips from a previous `gen-data` in the same directory, else freshly
/// generated or loaded as configured.
fn clips(cfg: &RunConfig, dir: &Path) -> Result<Vec<DetectionClip>> {
    let path = dir.join(exp::ANNOTATIONS_FILE);
    if path.exists() {
        Ok(load_annotations(&path)?)
    } else {
        Ok(exp::main_clips(cfg, cfg.experiment.seed)?)
    }
}

fn split(cfg: &RunConfig, dir: &Path) -> Result<SplitData> {
    Ok(exp::main_split(cfg, cfg.experiment.seed, &clips(cfg, dir)?)?)
}

fn load_encoder(cfg: &RunConfig, dir: &Path, d_shared: usize) -> Result<GraphEncoder> {
    let setting = cfg.experiment.setting;
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if !p.exists() {
            bail!("{} is missing; setting {setting} needs it from an earlier stage", p.display());
        }
        Ok(p)
    };
    Ok(match setting {
        Setting::NoSge => GraphEncoder::None,
        Setting::SgeUnaligned(_) => GraphEncoder::Unaligned(SgeModel::load(cfg.sge.clone(), &need(exp::SGE_CHECKPOINT)?)?),
        Setting::SgeAligned(_) => GraphEncoder::Aligned(AlignmentModel::load(
            cfg.sge.clone(),
            d_shared,
            &need(exp::ALIGN_CHECKPOINT)?,
        )?),
    })
}

fn print_metrics(setting: Setting, m: &stgi::data::MetricsReport) {
    println!(
        "{setting}: test accuracy {:.4}, balanced accuracy {:.4}, per-class recall {:?}",
        m.accuracy, m.balanced_accuracy, m.per_class_recall
    );
}
