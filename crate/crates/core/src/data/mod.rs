//! Dataset ingestion, synthetic scenarios, captions, splits and metrics.

mod annotations;
mod captions;
mod classes;
mod metrics;
mod split;
mod synthetic;

pub use annotations::{
    annotations_to_string, load_annotations, parse_annotations, write_annotations, AnnotatedFrame, DetectionClip,
};
pub use captions::{caption, CaptionCatalogue, CaptionStyle, GENERIC_CAPTION};
pub use classes::{AccidentClass, NUM_CLASSES};
pub use metrics::{compute_metrics, MetricsReport};
pub use split::{class_counts, split_dataset, split_indices, DatasetSplit, SplitIndices};
pub use synthetic::{generate_synthetic_dataset, DomainShift, GeneratorConfig};
