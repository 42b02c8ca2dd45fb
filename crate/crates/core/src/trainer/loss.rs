use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::{log_softmax_row, Real, Tensor2D};
use crate::quantizer::{TargetSequence, IGNORE};

/// Per-step loss breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_pw: f64,
    /// Zero for the Single variant.
    pub loss_frame: f64,
    pub total: f64,
    pub masked_pw_count: usize,
    pub masked_frame_count: usize,
}

/// `loss_pw + lambda * loss_frame`.
pub fn combine_loss(loss_pw: f64, loss_frame: f64, lambda: f64) -> f64 {
    loss_pw + lambda * loss_frame
}

fn check_inputs<T: Real>(logits: &Tensor2D<T>, targets: &TargetSequence, mask: &MaskSet) -> Result<()> {
    if logits.rows() != targets.len() || mask.frames() != targets.len() {
        return Err(Error::Shape(format!(
            "logits rows {}, targets {}, mask frames {}",
            logits.rows(),
            targets.len(),
            mask.frames()
        )));
    }
    Ok(())
}

/// Masked frames whose target is not IGNORE.
pub(crate) fn scored_frames<'a>(
    targets: &'a TargetSequence,
    mask: &'a MaskSet,
) -> impl Iterator<Item = (usize, u32)> + 'a {
    mask.indices()
        .iter()
        .map(|&t| (t, targets.labels[t]))
        .filter(|&(_, l)| l != IGNORE)
}

/// Cross-entropy averaged over masked, non-IGNORE frames. Frames outside the mask are
/// never read.
pub fn masked_ce<T: Real>(logits: &Tensor2D<T>, targets: &TargetSequence, mask: &MaskSet) -> Result<f64> {
    masked_ce_grad(logits, targets, mask).map(|(l, _, _)| l.to_f64_lossy())
}

/// Loss, gradient with respect to the logits, and the number of frames scored.
pub fn masked_ce_grad<T: Real>(
    logits: &Tensor2D<T>,
    targets: &TargetSequence,
    mask: &MaskSet,
) -> Result<(T, Tensor2D<T>, usize)> {
    check_inputs(logits, targets, mask)?;
    let k = logits.cols();
    let frames: Vec<(usize, u32)> = scored_frames(targets, mask).collect();
    if frames.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = T::from_usize(frames.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = Tensor2D::zeros(logits.rows(), k);
    for &(t, label) in &frames {
        let label = label as usize;
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "target {label} at frame {t} outside {k} classes"
            )));
        }
        let logp = log_softmax_row(logits.row(t));
        loss = loss - logp[label];
        let g = grad.row_mut(t);
        for (c, lp) in logp.iter().enumerate() {
            g[c] = lp.exp() / n;
        }
        g[label] = g[label] - T::one() / n;
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("masked cross-entropy".into()));
    }
    Ok((loss, grad, frames.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor2D::<f64>::zeros(6, 4);
        let t = TargetSequence::new(vec![0, 1, 2, 3, 0, 1]);
        let m = MaskSet::from_indices(6, vec![1, 4]).unwrap();
        assert!((masked_ce(&logits, &t, &m).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_near_zero() {
        let mut logits = Tensor2D::<f64>::zeros(3, 5);
        let t = TargetSequence::new(vec![2, 4, 0]);
        for (r, &l) in t.labels.iter().enumerate() {
            logits.set(r, l as usize, 50.0);
        }
        assert!(masked_ce(&logits, &t, &MaskSet::full(3)).unwrap() < 1e-6);
    }

    #[test]
    fn empty_mask_and_ignored_targets() {
        let logits = Tensor2D::<f32>::zeros(3, 2);
        let t = TargetSequence::new(vec![0, IGNORE, 1]);
        assert!(matches!(
            masked_ce(&logits, &t, &MaskSet::empty(3)),
            Err(Error::EmptyMask)
        ));
        let m = MaskSet::from_indices(3, vec![1]).unwrap();
        assert!(matches!(masked_ce(&logits, &t, &m), Err(Error::EmptyMask)));
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_loss(2.0, 0.5, 1.0), 2.5);
        assert_eq!(combine_loss(2.0, 0.5, 0.0), 2.0);
        assert_eq!(combine_loss(1.0, 1.0, 2.0), 3.0);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let logits = Tensor2D::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let t = TargetSequence::new(vec![3, 1, 0]);
        let m = MaskSet::from_indices(3, vec![0, 2]).unwrap();
        let (_, g, n) = masked_ce_grad(&logits, &t, &m).unwrap();
        assert_eq!(n, 2);
        let h = 1e-6;
        for i in 0..12 {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut q = logits.clone();
            q.data_mut()[i] -= h;
            let fd = (masked_ce(&p, &t, &m).unwrap() - masked_ce(&q, &t, &m).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
