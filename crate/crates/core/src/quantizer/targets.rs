use serde::{Deserialize, Serialize};

use super::kmeans::{assign, kmeans_fit, Codebook};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::segmentation::{pseudo_word_boundaries, AttentionWeights, SegmentList};

/// Label excluded from losses and metrics.
pub const IGNORE: u32 = u32::MAX;

/// One discrete label per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSequence {
    pub labels: Vec<u32>,
}

impl TargetSequence {
    pub fn new(labels: Vec<u32>) -> Self {
        Self { labels }
    }

    pub fn ignored(frames: usize) -> Self {
        Self {
            labels: vec![IGNORE; frames],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Largest non-IGNORE label, if any.
    pub fn max_label(&self) -> Option<u32> {
        self.labels.iter().copied().filter(|&l| l != IGNORE).max()
    }
}

/// Mean of the feature rows inside each segment, one output row per segment.
pub fn pool_segments(feats: &Tensor2D<f32>, segs: &SegmentList) -> Result<Tensor2D<f32>> {
    let dim = feats.cols();
    let mut out = Tensor2D::zeros(segs.len(), dim);
    for (i, s) in segs.iter().enumerate() {
        if s.end >= feats.rows() {
            return Err(Error::InvalidSegments(format!(
                "segment ({}, {}) outside {} frames",
                s.start,
                s.end,
                feats.rows()
            )));
        }
        let mut acc = vec![0.0f64; dim];
        for t in s.start..=s.end {
            for (a, &v) in acc.iter_mut().zip(feats.row(t)) {
                *a += v as f64;
            }
        }
        let n = s.len() as f64;
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = (a / n) as f32;
        }
    }
    Ok(out)
}

/// Repeats segment label `i` over every frame of segment `i`.
pub fn build_targets(ids: &[u32], segs: &SegmentList, frames: usize) -> Result<TargetSequence> {
    if ids.len() != segs.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} segments",
            ids.len(),
            segs.len()
        )));
    }
    if segs.is_empty() {
        return Ok(TargetSequence::ignored(frames));
    }
    if !segs.partitions(frames) {
        return Err(Error::InvalidSegments(format!(
            "segments do not partition [0, {}]",
            frames as i64 - 1
        )));
    }
    let mut labels = Vec::with_capacity(frames);
    for (&id, s) in ids.iter().zip(segs) {
        labels.extend(std::iter::repeat_n(id, s.len()));
    }
    Ok(TargetSequence { labels })
}

/// How segment boundaries and segment labels are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Thresholded attention, widened to midpoints, labels from the codebook.
    Attention,
    /// Reference boundaries, labels from the codebook.
    OracleBoundary,
    /// Reference boundaries and externally supplied word IDs.
    OracleId,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "oracle-boundary" => Ok(Self::OracleBoundary),
            "oracle-id" => Ok(Self::OracleId),
            other => Err(Error::InvalidArgument(format!("unknown target mode {other:?}"))),
        }
    }
}

/// Per-utterance inputs for [`generate_targets`]; which fields are needed depends on the
/// mode.
#[derive(Clone, Debug, Default)]
pub struct TargetInputs<'a> {
    pub feats: Option<&'a Tensor2D<f32>>,
    pub frames: usize,
    pub attention: Option<&'a AttentionWeights>,
    pub oracle_segments: Option<&'a SegmentList>,
    pub oracle_ids: Option<&'a [u32]>,
}

/// Segments the utterance according to `mode`, before any labelling.
pub fn target_segments(mode: TargetMode, inputs: &TargetInputs<'_>, threshold: f64) -> Result<SegmentList> {
    match mode {
        TargetMode::Attention => {
            let attn = inputs
                .attention
                .ok_or_else(|| Error::MissingInput("attention weights".into()))?;
            if attn.len() != inputs.frames {
                return Err(Error::Shape(format!(
                    "attention has {} frames, utterance has {}",
                    attn.len(),
                    inputs.frames
                )));
            }
            pseudo_word_boundaries(attn, threshold)
        }
        TargetMode::OracleBoundary | TargetMode::OracleId => inputs
            .oracle_segments
            .cloned()
            .ok_or_else(|| Error::MissingInput("oracle segments".into())),
    }
}

/// Full target pipeline for one utterance.
pub fn generate_targets(
    mode: TargetMode,
    inputs: &TargetInputs<'_>,
    codebook: Option<&Codebook>,
    threshold: f64,
) -> Result<TargetSequence> {
    let segs = target_segments(mode, inputs, threshold)?;
    if mode == TargetMode::OracleId {
        let ids = inputs
            .oracle_ids
            .ok_or_else(|| Error::MissingInput("oracle word ids".into()))?;
        return build_targets(ids, &segs, inputs.frames);
    }
    let cb = codebook.ok_or_else(|| Error::MissingInput("codebook".into()))?;
    let feats = inputs
        .feats
        .ok_or_else(|| Error::MissingInput("features".into()))?;
    if feats.rows() != inputs.frames {
        return Err(Error::Shape(format!(
            "features have {} frames, expected {}",
            feats.rows(),
            inputs.frames
        )));
    }
    if segs.is_empty() {
        return Ok(TargetSequence::ignored(inputs.frames));
    }
    let pooled = pool_segments(feats, &segs)?;
    let ids = assign(cb, &pooled)?;
    build_targets(&ids, &segs, inputs.frames)
}

/// Frame-level labels from clustering individual frames.
pub fn frame_targets(feats: &Tensor2D<f32>, k_frame: usize, seed: u64) -> Result<TargetSequence> {
    frame_targets_with(feats, k_frame, seed, 100, 1e-4)
}

pub fn frame_targets_with(
    feats: &Tensor2D<f32>,
    k_frame: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<TargetSequence> {
    let cb = kmeans_fit(feats, k_frame, seed, max_iter, tol)?;
    Ok(TargetSequence::new(assign(&cb, feats)?))
}
