//! Synthetic data, episode sampling and evaluation metrics.

pub mod io;
pub mod metrics;
pub mod sampler;
pub mod shapeworld;

pub use metrics::{compute_metrics, EpisodeOutcome, MetricAccumulator, MetricReport};
pub use sampler::{Episode, EpisodeSampler, SupportShot};
pub use shapeworld::{generate_dataset, Dataset, ShapeWorldSpec};
