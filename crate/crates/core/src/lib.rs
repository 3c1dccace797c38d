//! Tabular risk prediction with phase-lifted features, a self-refining k-NN
//! concept graph, neighbor-sequence neural learners, tree ensembles, isotonic
//! calibration and a logistic stacking meta-learner trained on out-of-fold
//! predictions.

pub mod artifact;
pub mod augment;
pub mod calibmetrics;
pub mod config;
pub mod dataset;
pub mod error;
pub mod forests;
pub mod graph;
pub mod neuralkernel;
pub mod phasemap;
pub mod seed;
pub mod split;
pub mod stack;

pub use config::{AugmentMode, RunConfig};
pub use error::{Error, Result};
