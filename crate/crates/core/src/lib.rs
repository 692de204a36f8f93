//! Action-conditioned next-frame prediction for driving image sequences.
//!
//! Given a short window of past grayscale frames and the control action taken
//! after the newest of them (acceleration, steering angle, brake), the models
//! here predict the next frame. The main model composes a small bank of
//! learned spatial basis images per prediction; a wide fully connected
//! variant and a copy-last-frame baseline sit beside it for comparison.
//! Everything is CPU-only and deterministic for a fixed seed.

pub mod autodiff;
pub mod cdna;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod roadworld;
pub mod tensor;
pub mod trainer;

pub use autodiff::{NodeId, Parameter, Tape};
pub use cdna::{KernelSet, MaskSet};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{ActionVector, DrivingLog, HistoryWindow, NormalizationStats, WindowedSample};
pub use error::{Error, Result};
pub use metrics::{evaluate, mse_image, ssim, EvalReport, LogSummary, SsimParams};
pub use model::{
    CopyConfig, ForwardPass, ModelConfig, ModelKind, Prediction, PredictiveModel,
    SdfTilingConfig, SdfVectorConfig,
};
pub use roadworld::{RoadState, RoadworldConfig};
pub use tensor::{Scalar, Tensor};
pub use trainer::{adam_step, train, AdamState, TrainConfig, TrainReport};
