//! Solar-panel segmentation of aerial tiles.
//!
//! A residual convolutional backbone is first pretrained by
//! self-distillation against a momentum teacher, then fine-tuned under a
//! query-based masked-attention segmentation head. Everything runs on a
//! small in-crate tensor engine with reverse-mode differentiation.

pub mod backbone;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pretext;
pub mod seghead;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, MultiScaleFeatures};
pub use config::RunConfig;
pub use datasets::{Checkpoint, Manifest, Sample, SampleRecord, Split, SyntheticSceneSpec};
pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, EvalReport};
pub use model::{ModelConfig, Segmenter};
pub use numerics::{DType, Graph, ParamStore, Scalar, Tensor, Var};
pub use objective::{FuseMode, FusedMask};
pub use pretext::{AugmentationSpec, PretextConfig, TeacherState};
pub use seghead::{MaskPrediction, SegHeadConfig};
pub use train::{TrainConfig, TrainedModel};
