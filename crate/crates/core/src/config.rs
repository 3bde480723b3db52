//! Run configuration: one TOML file with a section per pipeline stage.
//! Every section is optional and falls back to its defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::data::GeneratorConfig;
use crate::encoder::{PretrainConfig, SgeConfig};
use crate::error::{Error, Result};
use crate::fusion::HeadConfig;
use crate::providers::SyntheticEmbeddingConfig;
use crate::scene_graph::SceneGraphConfig;

/// Which data the encoder is pretrained on before alignment or fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PretrainSource {
    None,
    Shifted,
    Main,
    ShiftedThenMain,
}

impl PretrainSource {
    pub const ALL: [PretrainSource; 4] = [
        PretrainSource::None,
        PretrainSource::Shifted,
        PretrainSource::Main,
        PretrainSource::ShiftedThenMain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PretrainSource::None => "none",
            PretrainSource::Shifted => "shifted",
            PretrainSource::Main => "main",
            PretrainSource::ShiftedThenMain => "shifted+main",
        }
    }

    pub fn uses_shifted(self) -> bool {
        matches!(self, PretrainSource::Shifted | PretrainSource::ShiftedThenMain)
    }

    pub fn uses_main(self) -> bool {
        matches!(self, PretrainSource::Main | PretrainSource::ShiftedThenMain)
    }
}

/// One cell of the comparison grid. Written as `no_sge`,
/// `sge_aligned:<pretrain>` or `sge_unaligned:<pretrain>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    NoSge,
    SgeAligned(PretrainSource),
    SgeUnaligned(PretrainSource),
}

impl Setting {
    pub fn uses_graph(self) -> bool {
        self != Setting::NoSge
    }

    pub fn aligns(self) -> bool {
        matches!(self, Setting::SgeAligned(_))
    }

    pub fn pretrain(self) -> PretrainSource {
        match self {
            Setting::NoSge => PretrainSource::None,
            Setting::SgeAligned(p) | Setting::SgeUnaligned(p) => p,
        }
    }

    /// Unaligned graph embeddings are only meaningful after supervised
    /// pretraining on the main data.
    pub fn validate(self) -> Result<()> {
        match self {
            Setting::SgeUnaligned(p) if p != PretrainSource::Main => Err(Error::Config(format!(
                "setting sge_unaligned requires pretrain=main, got {}",
                p.name()
            ))),
            _ => Ok(()),
        }
    }

    /// Filesystem-safe name.
    pub fn slug(self) -> String {
        self.to_string().replace(':', "-").replace('+', "_")
    }

    pub fn grid() -> Vec<Setting> {
        let mut out = vec![Setting::NoSge];
        out.extend(PretrainSource::ALL.iter().map(|&p| Setting::SgeAligned(p)));
        out.push(Setting::SgeUnaligned(PretrainSource::Main));
        out
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::NoSge => f.write_str("no_sge"),
            Setting::SgeAligned(p) => write!(f, "sge_aligned:{}", p.name()),
            Setting::SgeUnaligned(p) => write!(f, "sge_unaligned:{}", p.name()),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "no_sge" {
            return Ok(Setting::NoSge);
        }
        let bad = || {
            Error::Config(format!(
                "unknown setting {s:?}; expected no_sge, sge_aligned:<p> or sge_unaligned:<p> with p in none|shifted|main|shifted+main"
            ))
        };
        let (kind, pretrain) = s.split_once(':').ok_or_else(bad)?;
        let p = PretrainSource::ALL
            .into_iter()
            .find(|p| p.name() == pretrain)
            .ok_or_else(bad)?;
        match kind {
            "sge_aligned" => Ok(Setting::SgeAligned(p)),
            "sge_unaligned" => Ok(Setting::SgeUnaligned(p)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub setting: Setting,
    /// Train / validation / test fractions, stratified by class.
    pub split_ratios: [f64; 3],
    /// Ingest this annotation file instead of generating synthetic clips.
    pub annotations: Option<PathBuf>,
    /// Size of the shifted pretraining set; defaults to `data.n_clips`.
    pub shifted_clips: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            setting: Setting::SgeAligned(PretrainSource::Main),
            split_ratios: [0.7, 0.15, 0.15],
            annotations: None,
            shifted_clips: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub source: ProviderSource,
    pub text_table: Option<PathBuf>,
    pub video_table: Option<PathBuf>,
    pub synthetic: SyntheticEmbeddingConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            source: ProviderSource::Synthetic,
            text_table: None,
            video_table: None,
            synthetic: SyntheticEmbeddingConfig::default(),
        }
    }
}

/// Axes of `run-grid`. Empty lists fall back to the single value of the
/// corresponding section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub settings: Vec<Setting>,
    pub seeds: Vec<u64>,
    /// Alignment batch sizes.
    pub batch_sizes: Vec<usize>,
    /// Alignment epoch counts.
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub data: GeneratorConfig,
    pub scene_graph: SceneGraphConfig,
    pub sge: SgeConfig,
    pub pretrain: PretrainConfig,
    pub providers: ProviderConfig,
    pub alignment: AlignmentConfig,
    pub head: HeadConfig,
    pub grid: GridConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section and their combinations, so inconsistent runs
    /// fail before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.experiment.setting.validate()?;
        if self.experiment.annotations.is_none() {
            self.data.validate()?;
        }
        crate::scene_graph::SceneGraphBuilder::new(&self.scene_graph)?;
        self.sge.validate()?;
        self.alignment.validate()?;
        match self.providers.source {
            ProviderSource::Synthetic => self.providers.synthetic.validate()?,
            ProviderSource::Files => {
                if self.providers.text_table.is_none() || self.providers.video_table.is_none() {
                    return Err(Error::Config(
                        "providers.source = \"files\" needs text_table and video_table".into(),
                    ));
                }
            }
        }
        if self.experiment.setting.pretrain() != PretrainSource::None && self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        if self.head.batch_size == 0 || self.head.hidden == 0 {
            return Err(Error::Config("head batch_size and hidden must be positive".into()));
        }
        for s in &self.grid.settings {
            s.validate()?;
        }
        if self.grid.batch_sizes.iter().any(|&b| b < 2) {
            return Err(Error::Config("grid batch sizes must be at least 2".into()));
        }
        Ok(())
    }
}
