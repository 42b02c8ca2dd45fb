//! Pseudo word-level targets for masked-prediction speech pretraining, at desk scale.
//!
//! The pipeline runs attention-based word segmentation, pools features inside each
//! segment, clusters the pooled vectors into a codebook, and duplicates each segment's
//! cluster ID across its frames. Those targets drive a masked-prediction objective for
//! a small transformer encoder in either of two layouts, described in [`model`].
//!
//! All randomness flows through [`numerics::RngStream`], so every stage is a pure
//! function of its inputs and seed, independent of the worker count.

pub mod error;
pub mod evaluation;
pub mod io;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod quantizer;
pub mod segmentation;
pub mod trainer;

pub use error::{Error, FormatError, Result};

/// The guide's chapters, compiled and run as doctests so the book stays in sync.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(segmentation, "segmentation.md");
    chapter!(targets, "targets.md");
    chapter!(masking, "masking.md");
    chapter!(model, "model.md");
    chapter!(training, "training.md");
    chapter!(evaluation, "evaluation.md");
    chapter!(formats, "formats.md");
    chapter!(cli, "cli.md");
}
