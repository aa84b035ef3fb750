//! Two-stage random-forest prediction of per-nutrient fertiliser timelines.
//!
//! Stage one classifies how many applications each nutrient needs over a
//! season. Stage two regresses, for the predicted count, the quantity and
//! day-from-seeding of every application plus season totals and yield.
//!
//! Tree ensembles train in parallel through rayon when the `parallel`
//! feature is enabled (the default); without it every loop runs serially and
//! produces bit-identical results.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod forest;
pub mod matrix;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tree;

pub use dataset::{ApplicationEvent, FieldSeasonRecord, Nutrient, NutrientTimeline};
pub use error::{Error, Result};
pub use forest::{ForestKind, ForestModel, ForestParams};
pub use matrix::Matrix;
pub use par::Execution;
pub use pipeline::{Mode, Recommendation, StageOneModel, StageTwoModel};
