//! Word-like segments from per-frame attention, widened to pseudo word boundaries.
//!
//! The attention runs a segmenter emits are narrower than the words they cover. The
//! boundary between two neighbouring runs is moved to the midpoint of the gap between
//! them, so that consecutive segments touch; the outer edges of the first and last run
//! stay put until [`extend_coverage`] stretches them to the utterance edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default attention threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Inclusive frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<[usize; 2]> for Segment {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Segment> for [usize; 2] {
    fn from(s: Segment) -> Self {
        [s.start, s.end]
    }
}

impl From<(usize, usize)> for Segment {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

/// Ordered, non-overlapping inclusive segments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct SegmentList(Vec<Segment>);

impl SegmentList {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.start > s.end {
                return Err(Error::InvalidSegments(format!(
                    "segment {i} starts after it ends: ({}, {})",
                    s.start, s.end
                )));
            }
        }
        for (i, w) in segments.windows(2).enumerate() {
            if w[0].end >= w[1].start {
                return Err(Error::InvalidSegments(format!(
                    "segments {i} and {} overlap or are out of order",
                    i + 1
                )));
            }
        }
        Ok(Self(segments))
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(pairs.iter().copied().map(Segment::from).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.0.iter()
    }

    pub fn to_pairs(&self) -> Vec<(usize, usize)> {
        self.0.iter().map(|s| (s.start, s.end)).collect()
    }

    /// True when the segments tile `[0, frames - 1]` with no gap.
    pub fn partitions(&self, frames: usize) -> bool {
        match (self.0.first(), self.0.last()) {
            (None, _) => frames == 0,
            (Some(first), Some(last)) => {
                first.start == 0
                    && last.end + 1 == frames
                    && self.0.windows(2).all(|w| w[0].end + 1 == w[1].start)
            }
            _ => unreachable!(),
        }
    }
}

impl<'de> Deserialize<'de> for SegmentList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<Segment>::deserialize(d)?;
        SegmentList::new(raw).map_err(serde::de::Error::custom)
    }
}

impl<'a> IntoIterator for &'a SegmentList {
    type Item = &'a Segment;
    type IntoIter = std::slice::Iter<'a, Segment>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Per-frame attention profile with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "attention weight {v} at frame {i} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maximal runs of frames whose attention exceeds `threshold`.
pub fn detect_segments(attn: &AttentionWeights, threshold: f64) -> Result<SegmentList> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    if attn.is_empty() {
        return Err(Error::InvalidArgument("empty attention profile".into()));
    }
    let mut segments = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &v) in attn.values().iter().enumerate() {
        match (v > threshold, open) {
            (true, None) => open = Some(t),
            (false, Some(start)) => {
                segments.push(Segment::new(start, t - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        segments.push(Segment::new(start, attn.len() - 1));
    }
    Ok(SegmentList(segments))
}

/// Moves every interior boundary to the floor of the midpoint between neighbouring
/// segments: the earlier segment ends at `m`, the later one starts at `m + 1`.
pub fn midpoint_adjust(segs: &SegmentList) -> Result<SegmentList> {
    if segs.is_empty() {
        return Err(Error::InvalidSegments(
            "midpoint adjustment needs at least one segment".into(),
        ));
    }
    let mut out = segs.0.clone();
    for i in 1..out.len() {
        let m = (segs.0[i - 1].end + segs.0[i].start) / 2;
        out[i - 1].end = m;
        out[i].start = m + 1;
    }
    Ok(SegmentList(out))
}

/// Stretches the first segment back to frame 0 and the last to `frames - 1`.
pub fn extend_coverage(segs: &SegmentList, frames: usize) -> Result<SegmentList> {
    let mut out = segs.0.clone();
    if let Some(last) = out.last_mut() {
        if last.end >= frames {
            return Err(Error::InvalidSegments(format!(
                "segment ends at frame {} but utterance has {frames} frames",
                last.end
            )));
        }
        last.end = frames - 1;
    }
    if let Some(first) = out.first_mut() {
        first.start = 0;
    }
    Ok(SegmentList(out))
}

/// detect → midpoint adjust → extend to the full utterance. An utterance with no
/// detected run yields an empty list.
pub fn pseudo_word_boundaries(attn: &AttentionWeights, threshold: f64) -> Result<SegmentList> {
    let detected = detect_segments(attn, threshold)?;
    if detected.is_empty() {
        return Ok(detected);
    }
    extend_coverage(&midpoint_adjust(&detected)?, attn.len())
}
