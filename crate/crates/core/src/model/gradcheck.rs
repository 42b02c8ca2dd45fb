//! Central finite-difference checks of the analytic gradients.

use serde::Serialize;

use super::{batch_loss_and_grads, BatchItem, Masks, ModelConfig, ModelParams, Objective, Sample, Variant};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::{RngStream, Tensor2D};
use crate::quantizer::{TargetSequence, IGNORE};

/// Differences below this are treated as agreement regardless of relative size.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Worst `|a − n| / max(|a|, |n|)` over entries whose absolute difference is at
    /// least [`ABS_FLOOR`].
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst relative error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.checked += 1;
        self.max_abs = self.max_abs.max(abs);
        if abs >= ABS_FLOOR {
            let rel = abs / analytic.abs().max(numeric.abs());
            if rel > self.max_rel {
                self.max_rel = rel;
                self.worst = Some((name.to_string(), index));
            }
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn finite_difference_check(
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!("{} inputs, {} gradients", x.len(), analytic.len())));
    }
    let mut report = GradCheckReport::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("loss during finite differencing".into()));
        }
        report.record("x", i, analytic[i], (up - down) / (2.0 * eps));
    }
    Ok(report)
}

/// Checks every trainable scalar of the model against central differences of the
/// batch-mean total loss. Frozen groups are skipped.
pub fn gradcheck(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    batch: &[BatchItem<'_, f64>],
    objective: Objective,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, base, grads) = batch_loss_and_grads(params, cfg, batch, objective)?;
    if !base.total.is_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    let loss = |p: &ModelParams<f64>| batch_loss_and_grads(p, cfg, batch, objective).map(|r| r.1.total);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let analytic = grads.named();
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        let (name, group) = (&analytic[ti].name, &analytic[ti].group);
        if params.is_frozen(group) {
            continue;
        }
        let len = analytic[ti].tensor.data().len();
        for i in 0..len {
            let orig = params.named()[ti].tensor.data()[i];
            probe.named_mut()[ti].tensor.data_mut()[i] = orig + eps;
            let up = loss(&probe)?;
            probe.named_mut()[ti].tensor.data_mut()[i] = orig - eps;
            let down = loss(&probe)?;
            probe.named_mut()[ti].tensor.data_mut()[i] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite(format!("loss while probing {name}")));
            }
            report.record(name, i, analytic[ti].tensor.data()[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Layout used by [`gradcheck_toy`]: model_dim 8, two backbone and two extra blocks.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        model_dim: 8,
        n_heads: 2,
        backbone_layers: 2,
        extra_layers: 2,
        frame_head_layer: 2,
        pw_head_layer: 4,
        k_frame: 4,
        k_pw: 5,
        variant,
        lambda: 0.7,
        ff_mult: 2,
        ln_eps: 1e-5,
    }
}

/// Gradient check of the toy layout on two random 64-bit utterances of at most 12
/// frames, with random targets (some IGNORE) and fixed masks.
pub fn gradcheck_toy(variant: Variant, lambda: f64, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        lambda,
        ..toy_config(variant)
    };
    let params = ModelParams::<f64>::init(&cfg, seed)?;
    let mut rng = RngStream::new(seed, "gradcheck");
    let mut data = Vec::new();
    for frames in [12usize, 9] {
        let feats = Tensor2D::from_vec(
            frames,
            cfg.input_dim,
            (0..frames * cfg.input_dim).map(|_| rng.normal()).collect(),
        )?;
        let mut label = |k: usize| {
            if rng.uniform() < 0.1 {
                IGNORE
            } else {
                rng.below(k) as u32
            }
        };
        let pw = TargetSequence::new((0..frames).map(|_| label(cfg.k_pw)).collect());
        let fr = TargetSequence::new((0..frames).map(|_| label(cfg.k_frame)).collect());
        let masks = Masks {
            pw: MaskSet::from_starts(frames, &[1, frames / 2 + 1], 3),
            frame: Some(MaskSet::from_starts(frames, &[0, frames - 4], 3)),
        };
        data.push((feats, pw, fr, masks));
    }
    let batch: Vec<BatchItem<'_, f64>> = data
        .iter()
        .map(|(feats, pw, fr, masks)| BatchItem {
            sample: Sample {
                feats,
                pw_targets: pw,
                frame_targets: Some(fr),
            },
            masks: masks.clone(),
        })
        .collect();
    let objective = Objective {
        lambda,
        frame_term: variant == Variant::Hierarchical,
    };
    gradcheck(&params, &cfg, &batch, objective, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{linear, linear_backward};
    use crate::trainer::masked_ce_grad;

    #[test]
    fn linear_plus_cross_entropy() {
        let mut r = RngStream::new(1, "gc-linear");
        let x = Tensor2D::from_vec(5, 3, (0..15).map(|_| r.normal()).collect()).unwrap();
        let w: Vec<f64> = (0..3 * 4).map(|_| r.normal()).collect();
        let targets = TargetSequence::new(vec![0, 3, IGNORE, 1, 2]);
        let mask = MaskSet::from_indices(5, vec![0, 1, 2, 4]).unwrap();
        let loss = |w: &[f64]| {
            let wt = Tensor2D::from_vec(3, 4, w.to_vec())?;
            let logits = linear(&x, &wt, &[0.0; 4])?;
            masked_ce_grad(&logits, &targets, &mask).map(|r| r.0)
        };
        let wt = Tensor2D::from_vec(3, 4, w.clone()).unwrap();
        let logits = linear(&x, &wt, &[0.0; 4]).unwrap();
        let (_, dlogits, _) = masked_ce_grad(&logits, &targets, &mask).unwrap();
        let mut dw = Tensor2D::zeros(3, 4);
        linear_backward(&x, &wt, &dlogits, Some(&mut dw), None).unwrap();
        let rep = finite_difference_check(&w, dw.data(), 1e-5, loss).unwrap();
        assert_eq!(rep.checked, 12);
        assert!(rep.max_rel < 1e-6, "{rep:?}");
    }

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            model_dim: 8,
            n_heads: 2,
            backbone_layers: 1,
            extra_layers: 1,
            frame_head_layer: 1,
            pw_head_layer: 2,
            k_frame: 3,
            k_pw: 4,
            variant,
            ff_mult: 2,
            ..Default::default()
        }
    }

    fn check(variant: Variant, lambda: f64) -> GradCheckReport {
        let cfg = small(variant);
        let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let mut r = RngStream::new(2, "gc-feats");
        let feats = Tensor2D::from_vec(6, 4, (0..24).map(|_| r.normal()).collect()).unwrap();
        let pw = TargetSequence::new(vec![0, 0, 2, 2, 3, 1]);
        let fr = TargetSequence::new(vec![1, 2, 0, 0, 1, 2]);
        let item = BatchItem {
            sample: Sample {
                feats: &feats,
                pw_targets: &pw,
                frame_targets: Some(&fr),
            },
            masks: Masks {
                pw: MaskSet::from_indices(6, vec![1, 2, 4]).unwrap(),
                frame: Some(MaskSet::from_indices(6, vec![0, 3, 5]).unwrap()),
            },
        };
        let obj = Objective {
            lambda,
            frame_term: variant == Variant::Hierarchical,
        };
        gradcheck(&params, &cfg, &[item], obj, 1e-5).unwrap()
    }

    #[test]
    fn single_model_gradients() {
        let rep = check(Variant::Single, 1.0);
        assert!(rep.checked > 0);
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn toy_layouts_pass() {
        assert!(gradcheck_toy(Variant::Single, 1.0, 0, 1e-5).unwrap().passes(1e-4));
        assert!(gradcheck_toy(Variant::Hierarchical, 0.7, 0, 1e-5).unwrap().passes(1e-4));
    }

    #[test]
    fn hierarchical_model_gradients() {
        let rep = check(Variant::Hierarchical, 0.7);
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
