//! Imitation-threshold estimation from precomputed image embeddings.
//!
//! The pipeline calibrates a same-concept similarity cutoff, filters each
//! concept's training candidates against vetted reference embeddings,
//! estimates how often the concept occurs in the training corpus, scores how
//! closely generated images match the filtered training images, and finally
//! runs PELT change-point detection over the frequency-sorted score series.
//! The frequency at the first change point is the imitation threshold.
//!
//! Every stage is a plain function over immutable inputs; [`pipeline`] wires
//! them together and persists each stage's output so it can be re-run alone.

pub mod calibration;
pub mod changepoint;
pub mod embeddings;
pub mod error;
pub mod filtering;
pub mod pipeline;
pub mod scoring;
pub mod selection;
pub mod stats;
pub mod synthetic;

pub use calibration::{CalibratedThreshold, PairSimilaritySample, ThresholdMethod};
pub use changepoint::{ChangePointResult, ScoreSeries, SeriesPoint, ThresholdOutcome};
pub use embeddings::{EmbeddingMatrix, SimilarityScore};
pub use error::{Error, Result};
pub use filtering::{ConceptRecord, Domain, FilterResult};
pub use pipeline::{run_pipeline, PipelineConfig, ThresholdReport};
pub use scoring::ImitationRecord;
pub use synthetic::{generate_domain, SyntheticDomainSpec};
