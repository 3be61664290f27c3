//! Localization of generatively inpainted image regions from ViT patch tokens.
//!
//! The pipeline embeds overlapping square windows with a frozen backbone, maps
//! each patch token to a logit with a small head, sums the per-pixel logits
//! of all covering windows and thresholds the fused map at zero.

pub mod backend;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod heads;
pub mod metrics;
pub mod perturb;
pub mod plane;
pub mod resample;
pub mod tiler;
pub mod trainer;
pub mod vit;

pub use backend::{AttentionMaps, BackendDescriptor, EmbeddingBackend, EmbeddingGrid, FixtureBackend, PatchStatsBackend};
pub use container::{Tensor, TensorContainer};
pub use dataset::{Manifest, Sample, Split};
pub use error::{Error, FormatError, Result};
pub use evaluate::{Localizer, TiledLocalizer};
pub use heads::{AttentionHead, Head, HeadVariant, LinearHead, MlpHead, PatchLogitGrid};
pub use metrics::{ConfusionCounts, ScoreRow, Scores};
pub use perturb::{AugmentationPolicy, PerturbationSpec};
pub use plane::{BinaryMask, FloatPlane, ImagePlane, PatchGridGeometry};
pub use resample::Kernel;
pub use tiler::{LocalizationResult, TilerConfig, WindowPlan};
pub use trainer::{TrainConfig, TrainOutcome};
pub use vit::{ReferenceVit, ViTConfig, ViTWeights};
