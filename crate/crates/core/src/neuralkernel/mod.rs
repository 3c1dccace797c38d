//! A small neural-network kernel: dense, layer-norm, attention, conv1d and
//! pooling layers with exact backward passes, Adam, and the three networks
//! used as base learners.

pub mod adam;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use layers::{attention, sigmoid, Mode};
pub use models::{BinaryNet, CnnSeq, CnnSeqConfig, Ffnn, FfnnConfig, SampleMatrix, Transformer, TransformerConfig};
pub use tensor::{NamedTensor, ParamSet};
pub use train::{train, TrainOptions};
