//! Segment pooling, k-means codebooks and frame-duplicated pseudo word-level targets.

mod kmeans;
mod targets;

pub use kmeans::{
    assign, inertia, kmeans_fit, kmeans_fit_restarts, kmeans_fit_traced, Codebook, KMeansConfig,
    KMeansFit,
};
pub use targets::{
    build_targets, frame_targets, frame_targets_with, generate_targets, pool_segments,
    target_segments, TargetInputs, TargetMode, TargetSequence, IGNORE,
};
