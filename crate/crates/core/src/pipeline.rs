//! Corpus-level glue between the stages: segmentation, codebook fitting, target
//! generation, training runs and the evaluations that read them back.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{masked_accuracy, nmi, purity};
use crate::io::{
    read_targets, write_checkpoint, write_targets, CheckpointMeta, MetricsWriter, RunConfig,
    SegmentRecord, Utterance,
};
use crate::masking::MaskConfig;
use crate::model::{pw_logits, ModelConfig, ModelParams, Variant};
use crate::numerics::{child_seed, Tensor2D};
use crate::parallel::map_chunks;
use crate::quantizer::{
    assign, generate_targets, kmeans_fit_restarts, pool_segments, Codebook, KMeansConfig, KMeansFit,
    TargetInputs, TargetMode, TargetSequence, IGNORE,
};
use crate::segmentation::pseudo_word_boundaries;
use crate::trainer::{StepMetrics, TrainExample, Trainer};

/// Attention-derived pseudo word boundaries for every utterance.
pub fn segment_corpus(utts: &[Utterance], threshold: f64) -> Result<Vec<SegmentRecord>> {
    map_chunks(utts.len(), 1, |i, _| {
        Ok(SegmentRecord {
            utt: utts[i].utt_id.clone(),
            segments: pseudo_word_boundaries(&utts[i].attention, threshold)?,
        })
    })
    .into_iter()
    .collect()
}

/// The reference segmentation as segment records.
pub fn oracle_records(utts: &[Utterance]) -> Vec<SegmentRecord> {
    utts.iter()
        .map(|u| SegmentRecord {
            utt: u.utt_id.clone(),
            segments: u.oracle_segments.clone(),
        })
        .collect()
}

/// Mean-pooled segment features of the whole corpus, stacked in corpus order.
pub fn pooled_corpus(utts: &[Utterance], records: &[SegmentRecord]) -> Result<Tensor2D<f32>> {
    if utts.is_empty() {
        return Err(Error::MissingInput("empty corpus".into()));
    }
    let parts = map_chunks(utts.len(), 1, |i, _| {
        let segs = crate::io::find_segments(records, &utts[i].utt_id)?;
        pool_segments(&utts[i].feats, segs)
    });
    let mut data = Vec::new();
    let dim = utts[0].feats.cols();
    for p in parts {
        data.extend_from_slice(p?.data());
    }
    Tensor2D::from_vec(data.len() / dim, dim, data)
}

/// Fits the pseudo word-level codebook on pooled segment vectors.
pub fn fit_codebook(utts: &[Utterance], records: &[SegmentRecord], cfg: &KMeansConfig) -> Result<KMeansFit> {
    kmeans_fit_restarts(&pooled_corpus(utts, records)?, cfg)
}

/// Targets for every utterance in `mode`.
pub fn corpus_targets(
    utts: &[Utterance],
    mode: TargetMode,
    codebook: Option<&Codebook>,
    threshold: f64,
) -> Result<Vec<TargetSequence>> {
    map_chunks(utts.len(), 1, |i, _| {
        let u = &utts[i];
        let inputs = TargetInputs {
            feats: Some(&u.feats),
            frames: u.frames(),
            attention: Some(&u.attention),
            oracle_segments: Some(&u.oracle_segments),
            oracle_ids: Some(&u.oracle_ids),
        };
        generate_targets(mode, &inputs, codebook, threshold)
    })
    .into_iter()
    .collect()
}

/// Frame-level targets from one k-means fit over every frame of the corpus.
pub fn corpus_frame_targets(utts: &[Utterance], cfg: &KMeansConfig) -> Result<(Codebook, Vec<TargetSequence>)> {
    if utts.is_empty() {
        return Err(Error::MissingInput("empty corpus".into()));
    }
    let dim = utts[0].feats.cols();
    let mut data = Vec::new();
    for u in utts {
        if u.feats.cols() != dim {
            return Err(Error::Shape(format!("{} has {} feature columns, expected {dim}", u.utt_id, u.feats.cols())));
        }
        data.extend_from_slice(u.feats.data());
    }
    let frames = Tensor2D::from_vec(data.len() / dim, dim, data)?;
    let fit = kmeans_fit_restarts(&frames, cfg)?;
    let labels = assign(&fit.codebook, &frames)?;
    let mut out = Vec::with_capacity(utts.len());
    let mut at = 0;
    for u in utts {
        out.push(TargetSequence::new(labels[at..at + u.frames()].to_vec()));
        at += u.frames();
    }
    Ok((fit.codebook, out))
}

pub fn target_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.pwt"))
}

pub fn write_target_dir(dir: &Path, utts: &[Utterance], targets: &[TargetSequence]) -> Result<()> {
    for (u, t) in utts.iter().zip(targets) {
        write_targets(&target_path(dir, &u.utt_id), t)?;
    }
    Ok(())
}

pub fn read_target_dir(dir: &Path, utts: &[Utterance]) -> Result<Vec<TargetSequence>> {
    utts.iter()
        .map(|u| {
            let path = target_path(dir, &u.utt_id);
            if !path.exists() {
                return Err(Error::MissingInput(format!("targets for {} at {}", u.utt_id, path.display())));
            }
            let t = read_targets(&path)?;
            if t.len() != u.frames() {
                return Err(Error::Shape(format!(
                    "{}: targets cover {} frames, features have {}",
                    u.utt_id,
                    t.len(),
                    u.frames()
                )));
            }
            Ok(t)
        })
        .collect()
}

/// Frame-level agreement of targets with the true word IDs, ignoring IGNORE frames.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TargetQuality {
    pub nmi: f64,
    pub purity: f64,
    pub frames: usize,
    pub ignored: usize,
}

pub fn target_quality(utts: &[Utterance], targets: &[TargetSequence]) -> Result<TargetQuality> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    let mut ignored = 0;
    for (u, t) in utts.iter().zip(targets) {
        for (&p, w) in t.labels.iter().zip(u.frame_word_ids()) {
            if p == IGNORE {
                ignored += 1;
            } else {
                pred.push(p);
                truth.push(w);
            }
        }
    }
    Ok(TargetQuality {
        nmi: nmi(&pred, &truth)?,
        purity: purity(&pred, &truth)?,
        frames: pred.len(),
        ignored,
    })
}

pub fn training_examples(
    utts: &[Utterance],
    pw: &[TargetSequence],
    frame: Option<&[TargetSequence]>,
) -> Result<Vec<TrainExample>> {
    if pw.len() != utts.len() || frame.is_some_and(|f| f.len() != utts.len()) {
        return Err(Error::MissingInput("targets for every utterance".into()));
    }
    Ok(utts
        .iter()
        .enumerate()
        .map(|(i, u)| TrainExample {
            utt_id: u.utt_id.clone(),
            feats: u.feats.clone(),
            pw_targets: pw[i].clone(),
            frame_targets: frame.map(|f| f[i].clone()),
        })
        .collect())
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.pwm";

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step{step:07}.pwm"))
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Trains from scratch; when `out_dir` is given, writes the metrics log, periodic
/// checkpoints and `final.pwm` there.
pub fn run_training(cfg: &RunConfig, examples: &[TrainExample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.trainer.clone(), cfg.masking.clone(), examples)?;
    let mut writer = out_dir.map(|d| MetricsWriter::create(&d.join(METRICS_FILE))).transpose()?;
    let every = cfg.trainer.checkpoint_every;
    let metrics = trainer.run(|m, t| {
        if let Some(w) = writer.as_mut() {
            w.write(m)?;
        }
        if let Some(d) = out_dir {
            if every > 0 && (m.step + 1) % every == 0 {
                write_checkpoint(
                    &checkpoint_path(d, m.step + 1),
                    &t.params,
                    &CheckpointMeta {
                        model: t.model_cfg.clone(),
                        step: m.step + 1,
                    },
                )?;
            }
        }
        Ok(())
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    if let Some(d) = out_dir {
        write_checkpoint(
            &d.join(FINAL_CHECKPOINT),
            &trainer.params,
            &CheckpointMeta {
                model: trainer.model_cfg.clone(),
                step: trainer.state.step,
            },
        )?;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        metrics,
    })
}

/// Word-level masked prediction accuracy pooled over every masked, scored frame of
/// `examples`, with masks drawn from `seed`.
pub fn masked_pw_accuracy(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    examples: &[TrainExample],
    mask_cfg: &MaskConfig,
    seed: u64,
) -> Result<f64> {
    let counts = map_chunks(examples.len(), 1, |i, _| {
        let ex = &examples[i];
        let (_, mask) = crate::masking::independent_masks(ex.feats.rows(), mask_cfg, child_seed(seed, i as u64));
        let logits = pw_logits(params, cfg, &ex.feats, &mask)?;
        match masked_accuracy(&logits, &ex.pw_targets, &mask) {
            Ok(acc) => {
                let n = crate::trainer::scored_frames(&ex.pw_targets, &mask).count();
                Ok(((acc * n as f64).round() as usize, n))
            }
            Err(Error::EmptyMask) => Ok((0, 0)),
            Err(e) => Err(e),
        }
    });
    let (mut hit, mut total) = (0, 0);
    for c in counts {
        let (h, n) = c?;
        hit += h;
        total += n;
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hit as f64 / total as f64)
}

/// Desk-scale run configuration: toy model, `k` pseudo-word classes.
pub fn desk_config(variant: Variant, k_pw: usize, k_frame: usize, input_dim: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            input_dim,
            k_pw,
            k_frame,
            variant,
            ..ModelConfig::default()
        },
        quantizer: KMeansConfig {
            k: k_pw,
            ..KMeansConfig::default()
        },
        ..RunConfig::default()
    }
}
