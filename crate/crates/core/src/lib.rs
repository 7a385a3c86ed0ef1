//! RGB-D glass surface segmentation with weighted feature fusion.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`graph`]), the fusion module ([`wff`]), a two-stream segmentation
//! network ([`segnet`]), segmentation metrics ([`metrics`]), dataset I/O and
//! a synthetic scene generator ([`data`]), and a deterministic training
//! harness ([`trainer`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod ops;
pub mod segnet;
pub mod tensor;
pub mod trainer;
mod util;
pub mod wff;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use data::{DatasetManifest, Difficulty, DifficultyMix, RgbdSample, SceneRecipe};
pub use error::{Error, Result};
pub use graph::{finite_diff_check, Gradients, Graph, ParamStore, Var};
pub use mask::Mask;
pub use metrics::{ConfusionCounts, ImageMetrics, MetricsReport};
pub use segnet::{FusionMode, Network, NetworkConfig};
pub use tensor::{Element, Tensor};
pub use trainer::{Ablation, EpochRecord, LrSchedule, OptimizerKind, TrainConfig, TrainLog};
pub use util::write_atomic;
pub use wff::{FusionWeights, WffParams};
