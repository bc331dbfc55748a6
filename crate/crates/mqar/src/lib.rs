//! Multi-query associative recall and a two-block model for comparing memory layers.
//!
//! The model is small enough to train on a CPU with hand-written gradients:
//! embedding, then per block an RMS-normalized mixer and MLP with residuals,
//! then an output head read only at query positions.

pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod mixer;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod train;

pub use data::{evaluation_set, generate_batch, generate_mqar, MqarBatch, MqarConfig};
pub use error::{MqarError, Result};
pub use mixer::{AlphaMode, LambdaStats, MixerConfig, MixerKind};
pub use model::{BatchStats, ModelConfig, ToyModel};
pub use train::{train_eval, train_run, RunResult, TrainConfig, TrainReport};
