//! Set-prediction model for grounded multimodal named entity recognition.
//!
//! A fixed set of learnable queries attends over text tokens and image
//! regions; each query then predicts one `(span, type, region)` quadruple
//! or nothing. Training matches queries to gold entities with an optimal
//! assignment so the loss does not depend on gold order.

pub mod autograd;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod queryset;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::{CostKind, LossConfig, Padding, QfnetConfig, RunConfig};
pub use data::{generate_synthetic, load_jsonl, save_jsonl, SyntheticSpec};
pub use error::{Error, Result};
pub use geometry::{iou, BoundingBox, RegionTarget};
pub use heads::{decode, DecodedSet, Prediction, PredictionBundle};
pub use matching::{brute_force_assignment, solve_hungarian, Assignment};
pub use metrics::{Counts, MetricReport, MetricRow, Task};
pub use model::{build_vocab, Model};
pub use tensor::Matrix;
pub use train::{benchmark, evaluate, train, write_predictions, BenchmarkReport, Checkpoint};
pub use types::{Example, Quadruple, Region, TypeSchema};
