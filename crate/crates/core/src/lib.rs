//! Building blocks for aspect-ratio-adaptive vehicle re-identification.
//!
//! The crate is organised along the pipeline:
//!
//! * [`patch_geometry`]: strided patch grids, aspect-ratio statistics and
//!   per-cluster resize plans.
//! * [`patch_mixup`]: intra-image patch mixup driven by grid distances.
//! * [`losses`]: ID cross-entropy, soft-margin batch-hard triplet loss and a
//!   finite-difference gradient checker.
//! * [`fusion`]: aspect-ratio aware weighting of features from several models.
//! * [`reid_eval`]: gallery ranking, average precision, mAP and CMC.
//! * [`toy_vit`]: a small transformer encoder with hand-written backprop that
//!   exercises the whole pipeline on synthetic data.
//! * [`io`]: dataset manifests, the binary feature store and run configs.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod patch_geometry;
pub mod patch_mixup;
pub mod reid_eval;
pub mod rng;
pub mod toy_vit;

pub use error::{Error, Result};
pub use fusion::{adaptive_weight, fuse_features, FusionPolicy, TaggedFeature};
pub use losses::{id_loss, overall_loss, triplet_loss, EmbeddingBatch, LogitBatch};
pub use patch_geometry::{
    aspect_ratio_stats, compute_patch_grid, plan_input_sizes, AspectRatioStats, ImageShape,
    PatchGrid, PatchSpec, ResizePlan,
};
pub use patch_mixup::{augment_batch, Image, MixupConfig, MixupPlan};
pub use reid_eval::{evaluate, DistanceKind, EvalProtocol, EvalReport, FeatureSet};
