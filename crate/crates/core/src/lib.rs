//! Uncertainty-aware rubric scoring for multi-rater speech assessment.
//!
//! The crate covers the whole pipeline on top of precomputed feature vectors:
//!
//! - [`dataio`]: utterance records with per-aspect multi-rater scores, the
//!   annotation/feature file formats and a seeded synthetic generator.
//! - [`scorer`]: a one-hidden-layer scorer with classification, regression or
//!   Gaussian (mean + variance) heads.
//! - [`objectives`]: the five training objectives and their gradients.
//! - [`trainer`]: AdamW mini-batch training.
//! - [`conformal`]: k-fold split-conformal calibration and coverage analysis.
//! - [`metrics`]: weighted F1, MCC, PCC, RMSE, QWK, lenient evaluation modes
//!   and report assembly.

pub mod conformal;
pub mod dataio;
pub mod metrics;
pub mod objectives;
pub mod scorer;
pub mod trainer;

pub use dataio::{Aspect, AspectStats, RubricLevel, UtteranceRecord};
pub use scorer::{PredictionSet, ScorerParams, Strategy};
