//! Residual deeply supervised 3D segmentation network with coarse-to-fine
//! sliding-window inference, implemented from scratch on CPU.

pub mod c2f;
pub mod config;
pub mod error;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod train;
pub mod volume;

pub use c2f::{BoundingBox, C2fOptions, CropRecord, PipelineReport};
pub use config::{RunConfig, SplitManifest};
pub use error::{Error, Result};
pub use metrics::{dsc, Connectivity};
pub use net::{Checkpoint, NetworkConfig, NetworkOutputs, ResDsn, Variant};
pub use tensor::{Param, Scalar, Tensor};
pub use tiling::{FusionMode, InferOptions, TilingPlan};
pub use train::{OptimConfig, StageKind, TrainConfig};
pub use volume::{CtVolume, LabelVolume, ProbabilityVolume, Volume};
