//! Frozen text and video embeddings, either looked up in precomputed
//! tables or generated from seeded class prototypes.

mod table;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AccidentClass, CaptionCatalogue, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numkit::NORM_EPSILON;
use crate::rng::{derive_seed, XorShiftRng};

pub use table::{EmbeddingTable, Modality, TABLE_MAGIC, TABLE_VERSION};

/// Source of frozen embeddings. Implementations never mutate state.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn text_embed(&self, caption: &str) -> Result<Vec<f64>>;
    fn video_embed(&self, clip_id: &str) -> Result<Vec<f64>>;
}

/// Exact lookups in a text table and a video table.
#[derive(Debug, Clone)]
pub struct FileProvider {
    pub text: EmbeddingTable,
    pub video: EmbeddingTable,
}

impl FileProvider {
    pub fn new(text: EmbeddingTable, video: EmbeddingTable) -> Result<Self> {
        if text.modality() != Modality::Text || video.modality() != Modality::Video {
            return Err(Error::Config("text and video tables are swapped or mislabeled".into()));
        }
        if text.dim() != video.dim() {
            return Err(Error::dim("embedding tables", &[text.dim()], &[video.dim()]));
        }
        Ok(FileProvider { text, video })
    }

    pub fn load(text_path: &Path, video_path: &Path) -> Result<Self> {
        FileProvider::new(EmbeddingTable::load(text_path)?, EmbeddingTable::load(video_path)?)
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.text.dim()
    }

    fn text_embed(&self, caption: &str) -> Result<Vec<f64>> {
        self.text.get(caption).map(<[f64]>::to_vec)
    }

    fn video_embed(&self, clip_id: &str) -> Result<Vec<f64>> {
        self.video.get(clip_id).map(<[f64]>::to_vec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEmbeddingConfig {
    pub dim: usize,
    pub prototype_seed: u64,
    /// Norm scale of the Gaussian noise added before normalization.
    pub noise_sigma: f64,
    /// Weight of the class prototype against the class-independent one.
    pub text_informativeness: f64,
    pub video_informativeness: f64,
}

impl Default for SyntheticEmbeddingConfig {
    fn default() -> Self {
        SyntheticEmbeddingConfig {
            dim: 32,
            prototype_seed: 0,
            noise_sigma: 0.1,
            text_informativeness: 1.0,
            video_informativeness: 1.0,
        }
    }
}

impl SyntheticEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("synthetic embedding dim must be at least 2, got {}", self.dim)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        for (name, v) in [("text", self.text_informativeness), ("video", self.video_informativeness)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}_informativeness must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Embeddings built as `normalize(w·p_class + (1-w)·p_global + σ·n)` with
/// `n ~ N(0, I/dim)` seeded by the lookup key. Text and video share the
/// class prototypes; the generic caption maps to `p_global`.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    config: SyntheticEmbeddingConfig,
    prototypes: [Vec<f64>; NUM_CLASSES],
    global: Vec<f64>,
    clip_classes: HashMap<String, AccidentClass>,
}

fn unit_normal(rng: &mut XorShiftRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticProvider {
    /// `clips` gives the true class of every clip the provider can embed.
    pub fn new<'a>(
        config: SyntheticEmbeddingConfig,
        clips: impl IntoIterator<Item = (&'a str, AccidentClass)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = XorShiftRng::new(derive_seed(config.prototype_seed, "prototypes"));
        let prototypes: [Vec<f64>; NUM_CLASSES] = std::array::from_fn(|_| unit_normal(&mut rng, config.dim));
        let global = unit_normal(&mut rng, config.dim);
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                if dot(&prototypes[i], &prototypes[j]).abs() > 1.0 - 1e-9 {
                    return Err(Error::Config(format!(
                        "prototype seed {} gives collinear class prototypes",
                        config.prototype_seed
                    )));
                }
            }
        }
        Ok(SyntheticProvider {
            config,
            prototypes,
            global,
            clip_classes: clips.into_iter().map(|(id, c)| (id.to_string(), c)).collect(),
        })
    }

    pub fn config(&self) -> &SyntheticEmbeddingConfig {
        &self.config
    }

    fn embed(&self, class: Option<AccidentClass>, informativeness: f64, noise_key: &str) -> Result<Vec<f64>> {
        let mut rng = XorShiftRng::new(derive_seed(self.config.prototype_seed, noise_key));
        let scale = self.config.noise_sigma / (self.config.dim as f64).sqrt();
        let v: Vec<f64> = (0..self.config.dim)
            .map(|k| {
                let signal = match class {
                    Some(c) => informativeness * self.prototypes[c.index()][k] + (1.0 - informativeness) * self.global[k],
                    None => self.global[k],
                };
                signal + scale * rng.normal()
            })
            .collect();
        let norm = dot(&v, &v).sqrt();
        if norm <= NORM_EPSILON {
            return Err(Error::DegenerateVector {
                norm,
                epsilon: NORM_EPSILON,
            });
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn text_embed(&self, caption: &str) -> Result<Vec<f64>> {
        let class = CaptionCatalogue::class_of(caption);
        if class.is_none() && caption != crate::data::GENERIC_CAPTION {
            return Err(Error::MissingKey {
                key: caption.to_string(),
                known: CaptionCatalogue::all_texts().into_iter().map(String::from).collect(),
            });
        }
        self.embed(class, self.config.text_informativeness, &format!("text/{caption}"))
    }

    fn video_embed(&self, clip_id: &str) -> Result<Vec<f64>> {
        let class = *self.clip_classes.get(clip_id).ok_or_else(|| {
            let mut known: Vec<String> = self.clip_classes.keys().cloned().collect();
            known.sort();
            Error::MissingKey {
                key: clip_id.to_string(),
                known,
            }
        })?;
        self.embed(Some(class), self.config.video_informativeness, &format!("video/{clip_id}"))
    }
}

/// Materialize text embeddings of the given captions and video embeddings
/// of the given clips as tables.
pub fn export_tables(
    provider: &dyn EmbeddingProvider,
    captions: &[&str],
    clip_ids: &[&str],
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let mut text = EmbeddingTable::new(Modality::Text, provider.dim())?;
    for c in captions {
        text.insert(*c, provider.text_embed(c)?)?;
    }
    let mut video = EmbeddingTable::new(Modality::Video, provider.dim())?;
    for id in clip_ids {
        video.insert(*id, provider.video_embed(id)?)?;
    }
    Ok((text, video))
}

#[cfg(test)]
mod tests;
