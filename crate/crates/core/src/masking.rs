//! Span masks over the frame axis.
//!
//! Every frame is independently a span start with probability `mask_prob`; each start
//! masks `span_len` frames (clipped at the end of the utterance) and overlapping spans
//! merge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const FRAME_STREAM: &str = "mask-frame";
pub const PW_STREAM: &str = "mask-pw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub mask_prob: f64,
    pub span_len: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.08,
            span_len: 10,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidArgument(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if self.span_len == 0 {
            return Err(Error::InvalidArgument("span_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sorted, duplicate-free set of masked frame indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    indices: Vec<usize>,
    frames: usize,
}

impl MaskSet {
    pub fn empty(frames: usize) -> Self {
        Self {
            indices: Vec::new(),
            frames,
        }
    }

    pub fn full(frames: usize) -> Self {
        Self {
            indices: (0..frames).collect(),
            frames,
        }
    }

    pub fn from_indices(frames: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= frames {
                return Err(Error::InvalidArgument(format!(
                    "mask index {last} outside {frames} frames"
                )));
            }
        }
        Ok(Self { indices, frames })
    }

    /// Union of spans `[s, s + span_len - 1]` clipped to the utterance.
    pub fn from_starts(frames: usize, starts: &[usize], span_len: usize) -> Self {
        let mut hit = vec![false; frames];
        for &s in starts {
            for h in hit.iter_mut().take((s + span_len).min(frames)).skip(s) {
                *h = true;
            }
        }
        Self::from_flags(&hit)
    }

    fn from_flags(hit: &[bool]) -> Self {
        Self {
            indices: hit
                .iter()
                .enumerate()
                .filter_map(|(i, &h)| h.then_some(i))
                .collect(),
            frames: hit.len(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }

    /// Dense per-frame flags.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.frames];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Draws one uniform per frame from `rng`, in frame order.
pub fn sample_mask(frames: usize, mask_prob: f64, span_len: usize, rng: &mut RngStream) -> MaskSet {
    let span_len = span_len.max(1);
    let mut hit = vec![false; frames];
    for t in 0..frames {
        if rng.bernoulli(mask_prob) {
            for h in hit.iter_mut().take((t + span_len).min(frames)).skip(t) {
                *h = true;
            }
        }
    }
    MaskSet::from_flags(&hit)
}

/// Two masks from separate streams, `(frame, pw)`.
pub fn independent_masks(frames: usize, cfg: &MaskConfig, seed: u64) -> (MaskSet, MaskSet) {
    let mut frame_rng = RngStream::new(seed, FRAME_STREAM);
    let mut pw_rng = RngStream::new(seed, PW_STREAM);
    (
        sample_mask(frames, cfg.mask_prob, cfg.span_len, &mut frame_rng),
        sample_mask(frames, cfg.mask_prob, cfg.span_len, &mut pw_rng),
    )
}
