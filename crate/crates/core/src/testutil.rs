//! Shared fixtures for unit tests.

pub use crate::numkit::gradcheck::{max_grad_error, max_store_grad_error, random_tensor, FD_TOLERANCE};

/// Scene-graph sequences of a small synthetic dataset.
pub fn synthetic_sequences(
    n_clips: usize,
    noise: f64,
    seed: u64,
) -> Vec<crate::scene_graph::TemporalGraphSequence> {
    use crate::data::{generate_synthetic_dataset, GeneratorConfig};
    use crate::scene_graph::{build_sequence, SceneGraphBuilder, SceneGraphConfig};
    let sg = SceneGraphConfig::default();
    let gen = GeneratorConfig {
        n_clips,
        noise,
        ..GeneratorConfig::default()
    };
    let clips = generate_synthetic_dataset(&gen, &sg.calibration(), seed).unwrap();
    let builder = SceneGraphBuilder::new(&sg).unwrap();
    clips.iter().map(|c| build_sequence(c, &builder).unwrap().0).collect()
}
