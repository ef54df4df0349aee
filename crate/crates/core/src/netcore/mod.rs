//! Residual CNN backbone with optional per-stage frequency attention, and
//! its training loop.

mod model;
mod train;

pub use model::{softmax_attack, Forward, Mode, Model, ModelConfig, NormStats, ATTACK, BONAFIDE};
pub use train::{train, EpochLog, LabeledImage, TargetPool, TrainConfig, TrainOutcome};
