//! Losses, learning-rate schedule, Adam, and the step loop.

mod loss;

pub use loss::{combine_loss, masked_ce, masked_ce_grad, LossReport};
pub(crate) use loss::scored_frames;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{independent_masks, MaskConfig};
use crate::model::{
    batch_loss_and_grads, BatchItem, Masks, ModelConfig, ModelParams, Objective, Sample, Variant,
};
use crate::numerics::{child_seed, RngStream, Tensor2D};
use crate::quantizer::TargetSequence;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Redraws allowed when every mask of a step misses all scored frames.
const MASK_RETRIES: u64 = 16;

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    /// Length of the learning-rate schedule.
    pub total_steps: usize,
    /// Stop after this many steps; defaults to `total_steps`.
    pub max_steps: Option<usize>,
    pub peak_lr: f64,
    /// Utterances per optimiser step.
    pub batch_size: usize,
    /// Micro-batches averaged per optimiser step.
    pub grad_accum: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Train the frame-level head of the Hierarchical variant.
    pub frame_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            total_steps: 2000,
            max_steps: None,
            peak_lr: 2e-3,
            batch_size: 1,
            grad_accum: 1,
            seed: 0,
            checkpoint_every: 0,
            frame_loss: true,
        }
    }
}

impl TrainConfig {
    /// Schedule used at full scale: 32k warmup steps to a 1e-4 peak.
    pub fn full_scale() -> Self {
        Self {
            warmup_steps: 32_000,
            total_steps: 500_000,
            peak_lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        self.max_steps.unwrap_or(self.total_steps).min(self.total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::InvalidArgument(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidArgument("batch_size and grad_accum must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak` at `warmup`, then linear decay to zero at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if warmup == 0 || warmup >= total || step > total {
        return Err(Error::InvalidArgument(format!(
            "schedule needs 0 < warmup < total and step <= total (step {step}, warmup {warmup}, total {total})"
        )));
    }
    Ok(if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    })
}

/// Optimiser moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: &ModelParams<f32>, seed: u64) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            seed,
        }
    }
}

/// One bias-corrected Adam update. Frozen groups are left untouched.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    state: &mut TrainState,
    grads: &ModelParams<f32>,
    lr: f64,
) -> Result<()> {
    let frozen: Vec<bool> = params.named().iter().map(|p| params.is_frozen(&p.group)).collect();
    let grads = grads.named();
    if grads.len() != frozen.len() {
        return Err(Error::Shape("gradient layout differs from parameters".into()));
    }
    for (g, &fz) in grads.iter().zip(&frozen) {
        if !fz && !g.tensor.is_finite() {
            let bad = g.tensor.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite(format!(
                "gradient of {} at index {bad} (step {})",
                g.name, state.step
            )));
        }
    }
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut ps = params.named_mut();
    let mut ms = state.m.named_mut();
    let mut vs = state.v.named_mut();
    for (i, g) in grads.iter().enumerate() {
        if frozen[i] {
            continue;
        }
        ps[i].tensor.check_same_shape(g.tensor)?;
        let p = ps[i].tensor.data_mut();
        let m = ms[i].tensor.data_mut();
        let v = vs[i].tensor.data_mut();
        for (j, &gj) in g.tensor.data().iter().enumerate() {
            let gj = gj as f64;
            let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
            let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    state.step += 1;
    Ok(())
}

/// A training utterance with its targets.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub utt_id: String,
    pub feats: Tensor2D<f32>,
    pub pw_targets: TargetSequence,
    pub frame_targets: Option<TargetSequence>,
}

/// One metrics-log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_pw: f64,
    pub loss_frame: f64,
    pub total: f64,
}

/// Owns the parameters, optimiser state and data for a run.
pub struct Trainer<'a> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub mask_cfg: MaskConfig,
    pub params: ModelParams<f32>,
    pub state: TrainState,
    data: &'a [TrainExample],
    sampler: RngStream,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        mask_cfg: MaskConfig,
        data: &'a [TrainExample],
    ) -> Result<Self> {
        let params = ModelParams::init(&model_cfg, train_cfg.seed)?;
        Self::with_params(model_cfg, train_cfg, mask_cfg, data, params)
    }

    /// Starts from existing parameters with fresh optimiser state.
    pub fn with_params(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        mask_cfg: MaskConfig,
        data: &'a [TrainExample],
        params: ModelParams<f32>,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        mask_cfg.validate()?;
        if data.is_empty() {
            return Err(Error::MissingInput("no training utterances".into()));
        }
        let need_frame = model_cfg.variant == Variant::Hierarchical && train_cfg.frame_loss;
        for ex in data {
            if ex.feats.cols() != model_cfg.input_dim {
                return Err(Error::Shape(format!(
                    "{}: {} feature columns, model expects {}",
                    ex.utt_id,
                    ex.feats.cols(),
                    model_cfg.input_dim
                )));
            }
            check_targets(&ex.utt_id, "pseudo-word", &ex.pw_targets, ex.feats.rows(), model_cfg.k_pw)?;
            if need_frame {
                let ft = ex
                    .frame_targets
                    .as_ref()
                    .ok_or_else(|| Error::MissingInput(format!("frame-level targets for {}", ex.utt_id)))?;
                check_targets(&ex.utt_id, "frame", ft, ex.feats.rows(), model_cfg.k_frame)?;
            }
        }
        let state = TrainState::new(&params, train_cfg.seed);
        let sampler = RngStream::new(train_cfg.seed, "sample");
        Ok(Self {
            model_cfg,
            train_cfg,
            mask_cfg,
            params,
            state,
            data,
            sampler,
        })
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.model_cfg.lambda,
            frame_term: self.model_cfg.variant == Variant::Hierarchical && self.train_cfg.frame_loss,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.train_cfg.steps()
    }

    /// Mask draw for batch slot `slot` of `step`. Depends only on the run seed.
    pub fn masks_for(&self, step: usize, slot: usize, attempt: u64, frames: usize) -> Masks {
        let per_step = (self.train_cfg.batch_size * self.train_cfg.grad_accum) as u64;
        let base = child_seed(self.train_cfg.seed ^ 0x6d61_736b, step as u64 * per_step + slot as u64);
        let seed = if attempt == 0 { base } else { child_seed(base, attempt) };
        let (frame, pw) = independent_masks(frames, &self.mask_cfg, seed);
        Masks {
            pw,
            frame: (self.model_cfg.variant == Variant::Hierarchical).then_some(frame),
        }
    }

    /// Runs one optimiser step and returns its log line.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let lr = lr_at(
            step + 1,
            self.train_cfg.warmup_steps,
            self.train_cfg.total_steps,
            self.train_cfg.peak_lr,
        )?;
        let n = self.train_cfg.batch_size * self.train_cfg.grad_accum;
        let picks: Vec<usize> = (0..n).map(|_| self.sampler.below(self.data.len())).collect();
        let objective = self.objective();
        let mut attempt = 0;
        let (report, grads) = loop {
            let masks: Vec<Masks> = picks
                .iter()
                .enumerate()
                .map(|(slot, &i)| self.masks_for(step, slot, attempt, self.data[i].feats.rows()))
                .collect();
            let items: Vec<BatchItem<'_, f32>> = picks
                .iter()
                .zip(masks)
                .map(|(&i, masks)| {
                    let ex = &self.data[i];
                    BatchItem {
                        sample: Sample {
                            feats: &ex.feats,
                            pw_targets: &ex.pw_targets,
                            frame_targets: ex.frame_targets.as_ref(),
                        },
                        masks,
                    }
                })
                .collect();
            match batch_loss_and_grads(&self.params, &self.model_cfg, &items, objective) {
                Ok((_, report, grads)) => break (report, grads),
                Err(Error::EmptyMask) if attempt < MASK_RETRIES => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        adam_step(&mut self.params, &mut self.state, &grads, lr)?;
        Ok(StepMetrics {
            step,
            lr,
            loss_pw: report.loss_pw,
            loss_frame: report.loss_frame,
            total: report.total,
        })
    }

    /// Steps until done, handing every log line to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics, &Self) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let m = self.step()?;
            on_step(&m, self)?;
            log.push(m);
        }
        Ok(log)
    }
}

fn check_targets(utt: &str, what: &str, t: &TargetSequence, frames: usize, k: usize) -> Result<()> {
    if t.len() != frames {
        return Err(Error::Shape(format!(
            "{utt}: {what} targets cover {} frames, features have {frames}",
            t.len()
        )));
    }
    if let Some(max) = t.max_label() {
        if max as usize >= k {
            return Err(Error::InvalidArgument(format!(
                "{utt}: {what} target {max} outside {k} classes"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::IGNORE;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(50, 100, 2000, 1.0).unwrap(), 0.5);
        assert_eq!(lr_at(100, 100, 2000, 3e-4).unwrap(), 3e-4);
        assert_eq!(lr_at(2000, 100, 2000, 1.0).unwrap(), 0.0);
        assert_eq!(lr_at(0, 100, 2000, 1.0).unwrap(), 0.0);
        assert!(lr_at(2001, 100, 2000, 1.0).is_err());
        assert!(lr_at(5, 100, 100, 1.0).is_err());
        assert!(lr_at(5, 0, 100, 1.0).is_err());
    }

    fn tiny_single() -> (ModelConfig, ModelParams<f32>) {
        let cfg = ModelConfig {
            input_dim: 3,
            model_dim: 4,
            n_heads: 1,
            backbone_layers: 1,
            extra_layers: 1,
            frame_head_layer: 1,
            pw_head_layer: 2,
            k_pw: 3,
            variant: Variant::Single,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 0).unwrap();
        (cfg, p)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (_, mut p) = tiny_single();
        let mut grads = p.zeros_like();
        grads.pw_head.bias.data_mut()[0] = 1.0;
        grads.pw_head.bias.data_mut()[1] = -4.0;
        let before = p.clone();
        let mut st = TrainState::new(&p, 0);
        adam_step(&mut p, &mut st, &grads, 0.01).unwrap();
        let d0 = p.pw_head.bias.data()[0] - before.pw_head.bias.data()[0];
        let d1 = p.pw_head.bias.data()[1] - before.pw_head.bias.data()[1];
        assert!((d0 as f64 + 0.01).abs() < 1e-7, "{d0}");
        assert!((d1 as f64 - 0.01).abs() < 1e-7, "{d1}");
        // Zero-gradient entries stay put.
        assert_eq!(p.pw_head.bias.data()[2], before.pw_head.bias.data()[2]);
        assert_eq!(p.pw_head.weight, before.pw_head.weight);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn frozen_groups_ignore_gradients() {
        let (_, mut p) = tiny_single();
        let mut grads = p.zeros_like();
        for g in grads.named_mut() {
            g.tensor.fill(1.0);
        }
        let before = p.clone();
        let mut st = TrainState::new(&p, 0);
        adam_step(&mut p, &mut st, &grads, 0.1).unwrap();
        assert_eq!(p.input_proj, before.input_proj);
        assert_eq!(p.blocks[0], before.blocks[0]);
        assert_ne!(p.blocks[1], before.blocks[1]);
        assert_ne!(p.layer_weights, before.layer_weights);
        assert_ne!(p.mask_embedding, before.mask_embedding);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (_, mut p) = tiny_single();
        let mut grads = p.zeros_like();
        grads.pw_head.weight.data_mut()[2] = f32::NAN;
        let mut st = TrainState::new(&p, 0);
        let err = adam_step(&mut p, &mut st, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("pw_head.weight"), "{err}");
    }

    fn toy_data(frames: usize, n: usize) -> Vec<TrainExample> {
        (0..n)
            .map(|u| {
                let mut r = RngStream::new(u as u64, "toy");
                let feats = Tensor2D::from_vec(frames, 3, (0..frames * 3).map(|_| r.normal() as f32).collect()).unwrap();
                let labels = (0..frames).map(|t| ((t / 4) % 3) as u32).collect();
                TrainExample {
                    utt_id: format!("u{u}"),
                    feats,
                    pw_targets: TargetSequence::new(labels),
                    frame_targets: Some(TargetSequence::new((0..frames).map(|t| (t % 2) as u32).collect())),
                }
            })
            .collect()
    }

    #[test]
    fn same_seed_same_run() {
        let (cfg, _) = tiny_single();
        let data = toy_data(20, 3);
        let tc = TrainConfig {
            warmup_steps: 2,
            total_steps: 10,
            max_steps: Some(4),
            ..Default::default()
        };
        let mask = MaskConfig {
            mask_prob: 0.2,
            span_len: 3,
        };
        let run = || {
            let mut t = Trainer::new(cfg.clone(), tc.clone(), mask.clone(), &data).unwrap();
            let log = t.run(|_, _| Ok(())).unwrap();
            (log, t.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.iter().all(|m| m.loss_frame == 0.0));
    }

    #[test]
    fn missing_frame_targets_rejected() {
        let cfg = ModelConfig {
            input_dim: 3,
            model_dim: 4,
            n_heads: 1,
            backbone_layers: 1,
            extra_layers: 1,
            frame_head_layer: 1,
            pw_head_layer: 2,
            k_pw: 3,
            k_frame: 2,
            ..Default::default()
        };
        let mut data = toy_data(10, 1);
        data[0].frame_targets = None;
        assert!(matches!(
            Trainer::new(cfg.clone(), TrainConfig::default(), MaskConfig::default(), &data),
            Err(Error::MissingInput(_))
        ));
        data[0].frame_targets = Some(TargetSequence::new(vec![IGNORE; 10]));
        data[0].pw_targets = TargetSequence::new(vec![7; 10]);
        assert!(Trainer::new(cfg, TrainConfig::default(), MaskConfig::default(), &data).is_err());
    }
}
