//! Toy masked-prediction encoder in two flavours.
//!
//! * **Single**: a frozen backbone whose per-layer outputs (including the input
//!   projection, depth 0) are mixed by softmax-normalised learnable weights, followed by
//!   trainable extra blocks and a word-level head.
//! * **Hierarchical**: one trainable stack with a frame-level head at
//!   `frame_head_layer` and a word-level head at `pw_head_layer`. Each head gets its own
//!   forward pass over its own mask.
//!
//! Masking replaces projected input rows with a learnable embedding before the
//! sinusoidal position code is added.

mod block;
mod config;
mod gradcheck;
mod params;

pub use config::{ModelConfig, Variant};
pub use gradcheck::{finite_difference_check, gradcheck, gradcheck_toy, toy_config, GradCheckReport, ABS_FLOOR};
pub use params::{BlockParams, LinearParams, ModelParams, NamedParam, NamedParamMut, NormParams};

use block::{apply_linear, block_backward, block_forward, linear_grad, BlockCache};

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::{softmax_rows, softmax_rows_backward, Real, Tensor2D};
use crate::quantizer::TargetSequence;
use crate::trainer::{combine_loss, masked_ce_grad, scored_frames, LossReport};

/// Rows of `feats` at masked frames replaced by `mask_embedding`.
pub fn apply_mask<T: Real>(feats: &Tensor2D<T>, mask: &MaskSet, mask_embedding: &[T]) -> Result<Tensor2D<T>> {
    if feats.cols() != mask_embedding.len() {
        return Err(Error::Shape(format!(
            "mask embedding of length {} for {} columns",
            mask_embedding.len(),
            feats.cols()
        )));
    }
    if mask.frames() > feats.rows() || mask.indices().last().is_some_and(|&t| t >= feats.rows()) {
        return Err(Error::Shape(format!(
            "mask over {} frames applied to {} rows",
            mask.frames(),
            feats.rows()
        )));
    }
    let mut out = feats.clone();
    for &t in mask.indices() {
        out.row_mut(t).copy_from_slice(mask_embedding);
    }
    Ok(out)
}

/// `Σ_l softmax(layer_weights)_l · hidden_l`.
pub fn weighted_sum<T: Real>(hidden: &[Tensor2D<T>], layer_weights: &[T]) -> Result<Tensor2D<T>> {
    if hidden.len() != layer_weights.len() || hidden.is_empty() {
        return Err(Error::Shape(format!(
            "{} layers, {} weights",
            hidden.len(),
            layer_weights.len()
        )));
    }
    let probs = softmax_rows(&Tensor2D::row_vector(layer_weights));
    let (rows, cols) = hidden[0].shape();
    let mut out = Tensor2D::zeros(rows, cols);
    for (h, &a) in hidden.iter().zip(probs.data()) {
        if h.shape() != (rows, cols) {
            return Err(Error::Shape("hidden layers differ in shape".into()));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(h.data()) {
            *o = *o + a * v;
        }
    }
    Ok(out)
}

/// Fixed sinusoidal position code, `frames × dim`.
pub fn positional_encoding<T: Real>(frames: usize, dim: usize) -> Tensor2D<T> {
    let mut pe = Tensor2D::zeros(frames, dim);
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe.set(t, i, T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    pe
}

fn check_input<T: Real>(cfg: &ModelConfig, feats: &Tensor2D<T>) -> Result<()> {
    if feats.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            feats.cols(),
            cfg.input_dim
        )));
    }
    if feats.rows() == 0 {
        return Err(Error::Shape("empty utterance".into()));
    }
    Ok(())
}

fn check_mask(mask: &MaskSet, frames: usize) -> Result<()> {
    if mask.frames() != frames {
        return Err(Error::Shape(format!(
            "mask covers {} frames, utterance has {frames}",
            mask.frames()
        )));
    }
    Ok(())
}

struct Embedded<T> {
    feats: Tensor2D<T>,
    mask: MaskSet,
    out: Tensor2D<T>,
}

fn embed<T: Real>(p: &ModelParams<T>, cfg: &ModelConfig, feats: &Tensor2D<T>, mask: &MaskSet) -> Result<Embedded<T>> {
    check_input(cfg, feats)?;
    check_mask(mask, feats.rows())?;
    let proj = apply_linear(feats, &p.input_proj)?;
    let mut out = apply_mask(&proj, mask, p.mask_embedding.data())?;
    out.add_assign(&positional_encoding(feats.rows(), cfg.model_dim))?;
    Ok(Embedded {
        feats: feats.clone(),
        mask: mask.clone(),
        out,
    })
}

fn embed_backward<T: Real>(
    p: &ModelParams<T>,
    e: &Embedded<T>,
    dout: &Tensor2D<T>,
    grad: &mut ModelParams<T>,
) -> Result<()> {
    let mut dproj = dout.clone();
    for &t in e.mask.indices() {
        for (g, &d) in grad.mask_embedding.data_mut().iter_mut().zip(dout.row(t)) {
            *g = *g + d;
        }
        dproj.row_mut(t).fill(T::zero());
    }
    linear_grad(&e.feats, &p.input_proj, &dproj, &mut grad.input_proj)?;
    Ok(())
}

/// A stack of blocks applied to an embedded input; `hidden[d]` is depth `d`.
struct Trunk<T> {
    embedded: Embedded<T>,
    hidden: Vec<Tensor2D<T>>,
    caches: Vec<BlockCache<T>>,
}

fn run_trunk<T: Real>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    feats: &Tensor2D<T>,
    mask: &MaskSet,
    depth: usize,
) -> Result<Trunk<T>> {
    let embedded = embed(p, cfg, feats, mask)?;
    let eps = T::lit(cfg.ln_eps);
    let mut hidden = vec![embedded.out.clone()];
    let mut caches = Vec::with_capacity(depth);
    for b in &p.blocks[..depth] {
        let (h, c) = block_forward(b, hidden.last().unwrap(), cfg.n_heads, eps)?;
        hidden.push(h);
        caches.push(c);
    }
    Ok(Trunk {
        embedded,
        hidden,
        caches,
    })
}

/// Backward through `trunk` given the gradient at its top, plus optional extra
/// gradients injected at intermediate depths.
fn trunk_backward<T: Real>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    trunk: &Trunk<T>,
    dtop: Tensor2D<T>,
    inject: &[(usize, Tensor2D<T>)],
    grad: &mut ModelParams<T>,
) -> Result<()> {
    let depth = trunk.caches.len();
    let mut dh = dtop;
    for d in (0..=depth).rev() {
        for (at, g) in inject {
            if *at == d {
                dh.add_assign(g)?;
            }
        }
        if d == 0 {
            break;
        }
        dh = block_backward(&p.blocks[d - 1], &trunk.caches[d - 1], &dh, &mut grad.blocks[d - 1], cfg.n_heads)?;
    }
    embed_backward(p, &trunk.embedded, &dh, grad)
}

struct SingleForward<T> {
    backbone: Trunk<T>,
    mix: Tensor2D<T>,
    mixed: Tensor2D<T>,
    extra_hidden: Vec<Tensor2D<T>>,
    extra_caches: Vec<BlockCache<T>>,
    logits: Tensor2D<T>,
}

fn single_forward<T: Real>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    feats: &Tensor2D<T>,
    mask: &MaskSet,
) -> Result<SingleForward<T>> {
    if cfg.variant != Variant::Single || p.variant != Variant::Single {
        return Err(Error::InvalidArgument("single forward on a non-single model".into()));
    }
    let lw = p
        .layer_weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("single model without layer weights".into()))?;
    let backbone = run_trunk(p, cfg, feats, mask, cfg.backbone_layers)?;
    let mix = softmax_rows(lw);
    let mixed = weighted_sum(&backbone.hidden, lw.data())?;
    let eps = T::lit(cfg.ln_eps);
    let mut extra_hidden = vec![mixed.clone()];
    let mut extra_caches = Vec::new();
    for b in &p.blocks[cfg.backbone_layers..] {
        let (h, c) = block_forward(b, extra_hidden.last().unwrap(), cfg.n_heads, eps)?;
        extra_hidden.push(h);
        extra_caches.push(c);
    }
    let logits = apply_linear(extra_hidden.last().unwrap(), &p.pw_head)?;
    Ok(SingleForward {
        backbone,
        mix,
        mixed,
        extra_hidden,
        extra_caches,
        logits,
    })
}

fn single_backward<T: Real>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    fwd: &SingleForward<T>,
    dlogits: &Tensor2D<T>,
    grad: &mut ModelParams<T>,
) -> Result<()> {
    let top = fwd.extra_hidden.last().unwrap();
    let mut dh = linear_grad(top, &p.pw_head, dlogits, &mut grad.pw_head)?;
    let b0 = cfg.backbone_layers;
    for i in (0..fwd.extra_caches.len()).rev() {
        dh = block_backward(&p.blocks[b0 + i], &fwd.extra_caches[i], &dh, &mut grad.blocks[b0 + i], cfg.n_heads)?;
    }
    let dmixed = dh;
    debug_assert_eq!(dmixed.shape(), fwd.mixed.shape());

    // Mixture weights: d a_l = <dmixed, h_l>, then through the softmax.
    let a = fwd.mix.data();
    let da: Vec<T> = fwd
        .backbone
        .hidden
        .iter()
        .map(|h| h.data().iter().zip(dmixed.data()).map(|(&x, &g)| x * g).sum())
        .collect();
    let dlw = softmax_rows_backward(&fwd.mix, &Tensor2D::row_vector(&da));
    if let Some(g) = grad.layer_weights.as_mut() {
        g.add_assign(&dlw)?;
    }
    let inject: Vec<(usize, Tensor2D<T>)> = a
        .iter()
        .enumerate()
        .map(|(l, &w)| (l, dmixed.scale(w)))
        .collect();
    let rows = dmixed.rows();
    trunk_backward(p, cfg, &fwd.backbone, Tensor2D::zeros(rows, cfg.model_dim), &inject, grad)
}

/// Word-level logits (`T × k_pw`) of the Single variant.
pub fn forward_single<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    feats: &Tensor2D<T>,
    mask: &MaskSet,
) -> Result<Tensor2D<T>> {
    single_forward(params, cfg, feats, mask).map(|f| f.logits)
}

fn check_hierarchical<T>(p: &ModelParams<T>, cfg: &ModelConfig) -> Result<()> {
    if cfg.variant != Variant::Hierarchical || p.variant != Variant::Hierarchical || p.frame_head.is_none() {
        return Err(Error::InvalidArgument(
            "hierarchical forward on a non-hierarchical model".into(),
        ));
    }
    Ok(())
}

/// `(frame logits at frame_head_layer, pw logits at pw_head_layer)`, each from its own
/// masked pass.
pub fn forward_hierarchical<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    feats: &Tensor2D<T>,
    mask_frame: &MaskSet,
    mask_pw: &MaskSet,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    check_hierarchical(params, cfg)?;
    let frame = run_trunk(params, cfg, feats, mask_frame, cfg.frame_head_layer)?;
    let pw = run_trunk(params, cfg, feats, mask_pw, cfg.pw_head_layer)?;
    let frame_head = params.frame_head.as_ref().unwrap();
    Ok((
        apply_linear(frame.hidden.last().unwrap(), frame_head)?,
        apply_linear(pw.hidden.last().unwrap(), &params.pw_head)?,
    ))
}

/// Word-level logits for one masked pass of either variant.
pub fn pw_logits<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    feats: &Tensor2D<T>,
    mask: &MaskSet,
) -> Result<Tensor2D<T>> {
    match cfg.variant {
        Variant::Single => forward_single(params, cfg, feats, mask),
        Variant::Hierarchical => {
            check_hierarchical(params, cfg)?;
            let pw = run_trunk(params, cfg, feats, mask, cfg.pw_head_layer)?;
            apply_linear(pw.hidden.last().unwrap(), &params.pw_head)
        }
    }
}

/// Hidden states of the unmasked input at every depth `0..=total_layers`. For the
/// Single variant, depths above the backbone follow the layer mixture.
pub fn hidden_states<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    feats: &Tensor2D<T>,
) -> Result<Vec<Tensor2D<T>>> {
    let none = MaskSet::empty(feats.rows());
    match cfg.variant {
        Variant::Hierarchical => {
            check_hierarchical(params, cfg)?;
            Ok(run_trunk(params, cfg, feats, &none, cfg.total_layers())?.hidden)
        }
        Variant::Single => {
            let f = single_forward(params, cfg, feats, &none)?;
            let mut out = f.backbone.hidden;
            out.extend(f.extra_hidden.into_iter().skip(1));
            Ok(out)
        }
    }
}

/// One training example in the model's working precision.
#[derive(Clone, Debug)]
pub struct Sample<'a, T> {
    pub feats: &'a Tensor2D<T>,
    pub pw_targets: &'a TargetSequence,
    pub frame_targets: Option<&'a TargetSequence>,
}

/// Masks for one example; `frame` is only read by the Hierarchical variant.
#[derive(Clone, Debug)]
pub struct Masks {
    pub pw: MaskSet,
    pub frame: Option<MaskSet>,
}

/// Which loss terms contribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    /// When false the frame-level head is neither evaluated nor trained.
    pub frame_term: bool,
}

fn term<T: Real>(logits: &Tensor2D<T>, targets: &TargetSequence, mask: &MaskSet) -> Result<Option<(T, Tensor2D<T>, usize)>> {
    match masked_ce_grad(logits, targets, mask) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Loss report and parameter gradients of `L = L_pw + λ·L_frame` for one example.
///
/// A term whose mask selects no scored frame contributes nothing; if no term
/// contributes the call fails with [`Error::EmptyMask`].
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    sample: &Sample<'_, T>,
    masks: &Masks,
    objective: Objective,
) -> Result<(LossReport, ModelParams<T>)> {
    let (mut report, grad) = weighted_loss_and_grads(params, cfg, sample, masks, objective, 1.0, objective.lambda)?;
    report.total = combine_loss(report.loss_pw, report.loss_frame, objective.lambda);
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((report, grad))
}

/// Unweighted per-term losses, gradients of `w_pw·L_pw + w_frame·L_frame`.
fn weighted_loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    sample: &Sample<'_, T>,
    masks: &Masks,
    objective: Objective,
    w_pw: f64,
    w_frame: f64,
) -> Result<(LossReport, ModelParams<T>)> {
    let mut grad = params.zeros_like();
    let mut report = LossReport::default();
    match cfg.variant {
        Variant::Single => {
            let fwd = single_forward(params, cfg, sample.feats, &masks.pw)?;
            let (loss, dlogits, n) =
                term(&fwd.logits, sample.pw_targets, &masks.pw)?.ok_or(Error::EmptyMask)?;
            single_backward(params, cfg, &fwd, &dlogits.scale(T::lit(w_pw)), &mut grad)?;
            report.loss_pw = loss.to_f64_lossy();
            report.masked_pw_count = n;
        }
        Variant::Hierarchical => {
            check_hierarchical(params, cfg)?;
            let mut any = false;
            let pw = run_trunk(params, cfg, sample.feats, &masks.pw, cfg.pw_head_layer)?;
            let pw_logits = apply_linear(pw.hidden.last().unwrap(), &params.pw_head)?;
            if let Some((loss, dlogits, n)) = term(&pw_logits, sample.pw_targets, &masks.pw)? {
                let dlogits = dlogits.scale(T::lit(w_pw));
                let dtop = linear_grad(pw.hidden.last().unwrap(), &params.pw_head, &dlogits, &mut grad.pw_head)?;
                trunk_backward(params, cfg, &pw, dtop, &[], &mut grad)?;
                report.loss_pw = loss.to_f64_lossy();
                report.masked_pw_count = n;
                any = true;
            }
            if objective.frame_term {
                let (targets, mask) = frame_inputs(sample, masks)?;
                let head = params.frame_head.as_ref().unwrap();
                let fr = run_trunk(params, cfg, sample.feats, mask, cfg.frame_head_layer)?;
                let logits = apply_linear(fr.hidden.last().unwrap(), head)?;
                if let Some((loss, dlogits, n)) = term(&logits, targets, mask)? {
                    let dlogits = dlogits.scale(T::lit(w_frame));
                    let dtop = linear_grad(
                        fr.hidden.last().unwrap(),
                        head,
                        &dlogits,
                        grad.frame_head.as_mut().unwrap(),
                    )?;
                    trunk_backward(params, cfg, &fr, dtop, &[], &mut grad)?;
                    report.loss_frame = loss.to_f64_lossy();
                    report.masked_frame_count = n;
                    any = true;
                }
            }
            if !any {
                return Err(Error::EmptyMask);
            }
        }
    }
    Ok((report, grad))
}

fn frame_inputs<'s>(sample: &Sample<'s, impl Real>, masks: &'s Masks) -> Result<(&'s TargetSequence, &'s MaskSet)> {
    let targets = sample
        .frame_targets
        .ok_or_else(|| Error::MissingInput("frame-level targets".into()))?;
    let mask = masks
        .frame
        .as_ref()
        .ok_or_else(|| Error::MissingInput("frame-level mask".into()))?;
    Ok((targets, mask))
}

/// A sample paired with its masks.
#[derive(Clone, Debug)]
pub struct BatchItem<'a, T> {
    pub sample: Sample<'a, T>,
    pub masks: Masks,
}

/// Batch objective: each term is averaged over the items whose mask scores at least one
/// frame for it, so `L = mean_pw + λ·mean_frame`. A batch in which no item scores a
/// word-level frame fails with [`Error::EmptyMask`], whatever the frame term holds.
///
/// Items are evaluated in parallel and reduced in item order, so the result does not
/// depend on the worker count. Returns one report per item (`None` for items that score
/// nothing), the batch report, and the gradient of the batch loss.
pub fn batch_loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    items: &[BatchItem<'_, T>],
    objective: Objective,
) -> Result<(Vec<Option<LossReport>>, LossReport, ModelParams<T>)> {
    let frame_term = objective.frame_term && cfg.variant == Variant::Hierarchical;
    let mut n_pw = 0usize;
    let mut n_frame = 0usize;
    for it in items {
        if scored_frames(it.sample.pw_targets, &it.masks.pw).next().is_some() {
            n_pw += 1;
        }
        if frame_term {
            let (targets, mask) = frame_inputs(&it.sample, &it.masks)?;
            if scored_frames(targets, mask).next().is_some() {
                n_frame += 1;
            }
        }
    }
    if n_pw == 0 {
        return Err(Error::EmptyMask);
    }
    let w_pw = 1.0 / n_pw as f64;
    let w_frame = if n_frame > 0 { objective.lambda / n_frame as f64 } else { 0.0 };
    let per_item = crate::parallel::map_chunks(items.len(), 1, |s, _| {
        let it = &items[s];
        match weighted_loss_and_grads(params, cfg, &it.sample, &it.masks, objective, w_pw, w_frame) {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyMask) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut reports = Vec::with_capacity(items.len());
    let mut grad = params.zeros_like();
    let mut mean = LossReport::default();
    for r in per_item {
        match r? {
            Some((mut rep, g)) => {
                grad.add_scaled(&g, T::one())?;
                mean.loss_pw += rep.loss_pw;
                mean.loss_frame += rep.loss_frame;
                mean.masked_pw_count += rep.masked_pw_count;
                mean.masked_frame_count += rep.masked_frame_count;
                rep.total = combine_loss(rep.loss_pw, rep.loss_frame, objective.lambda);
                reports.push(Some(rep));
            }
            None => reports.push(None),
        }
    }
    mean.loss_pw /= n_pw as f64;
    if n_frame > 0 {
        mean.loss_frame /= n_frame as f64;
    }
    mean.total = combine_loss(mean.loss_pw, mean.loss_frame, objective.lambda);
    if !mean.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((reports, mean, grad))
}
