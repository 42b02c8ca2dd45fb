//! `pwhubert`: the pipeline as subcommands.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pwhubert::evaluation::{corpus_boundary_f1, similarity_judgement, WordPair};
use pwhubert::io::{
    find_segments, read_checkpoint, read_codebook, read_config, read_matrix, read_pairs, read_segments,
    synth_corpus, synth_word_pairs, write_codebook, write_corpus, write_segments, write_word_pairs,
    Manifest, RunConfig, SegmentRecord, SynthConfig, Utterance,
};
use pwhubert::model::{gradcheck_toy, Variant};
use pwhubert::pipeline::{
    corpus_frame_targets, corpus_targets, fit_codebook, oracle_records, read_target_dir, run_training,
    segment_corpus, target_quality, training_examples, write_target_dir, FINAL_CHECKPOINT, METRICS_FILE,
};
use pwhubert::quantizer::{KMeansConfig, TargetMode};
use pwhubert::segmentation::{pseudo_word_boundaries, AttentionWeights, DEFAULT_THRESHOLD};

/// Invocation mistakes detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "pwhubert", version, about = "Pseudo word-level targets and masked-prediction training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with planted words.
    Synth(SynthArgs),
    /// Detect attention segments and widen them to pseudo word boundaries.
    Segment(SegmentArgs),
    /// Cluster mean-pooled segment features into a codebook.
    FitCodebook(FitCodebookArgs),
    /// Write per-utterance pseudo word-level targets.
    Targets(TargetsArgs),
    /// Write per-utterance frame-level targets from frame clustering.
    FrameTargets(FrameTargetsArgs),
    /// Train a model and write a metrics log and checkpoints.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients on toy models.
    Gradcheck(GradcheckArgs),
    /// Word similarity judgement: Spearman correlation with human scores.
    EvalSem(EvalSemArgs),
    /// NMI and purity of targets against the reference word IDs.
    EvalCluster(EvalClusterArgs),
    /// Boundary precision, recall and F1 against the reference segmentation.
    EvalBoundary(EvalBoundaryArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives manifest.json and the per-utterance files.
    #[arg(long)]
    out: PathBuf,
    /// Number of distinct words.
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    /// Number of utterances.
    #[arg(long, default_value_t = 200)]
    utterances: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Shortest word, in frames (at least 3).
    #[arg(long, default_value_t = 6)]
    min_word_len: usize,
    /// Longest word, in frames.
    #[arg(long, default_value_t = 12)]
    max_word_len: usize,
    /// Fewest words per utterance.
    #[arg(long, default_value_t = 3)]
    min_words: usize,
    /// Most words per utterance.
    #[arg(long, default_value_t = 6)]
    max_words: usize,
    /// Also write this many isolated word pairs to OUT/pairs/pairs.csv.
    #[arg(long, default_value_t = 0)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Attention files (PWF1, one column); the utterance ID is the file stem.
    #[arg(long, num_args = 1.., conflicts_with = "manifest", required_unless_present = "manifest")]
    attn: Vec<PathBuf>,
    /// Segment every utterance of a manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Attention threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Output segment file (one JSON line per utterance).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KMeansArgs {
    /// Number of clusters (4096 at full scale).
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lloyd iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Stop when no centroid moves further than this.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

impl KMeansArgs {
    fn config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.clusters,
            seed: self.seed,
            max_iter: self.max_iter,
            tol: self.tol,
            restarts: self.restarts,
        }
    }
}

#[derive(Args, Debug)]
struct FitCodebookArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Segment file to pool over (from `segment`).
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    segments: Option<PathBuf>,
    /// Pool over the reference segmentation instead.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    kmeans: KMeansArgs,
    /// Output codebook (PWC1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Attention boundaries, codebook labels.
    Attention,
    /// Reference boundaries, codebook labels.
    OracleBoundary,
    /// Reference boundaries and reference word IDs; no codebook.
    OracleId,
}

impl From<ModeArg> for TargetMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Attention => TargetMode::Attention,
            ModeArg::OracleBoundary => TargetMode::OracleBoundary,
            ModeArg::OracleId => TargetMode::OracleId,
        }
    }
}

#[derive(Args, Debug)]
struct TargetsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Codebook (PWC1); required unless --mode oracle-id.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Attention threshold for --mode attention.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Output directory; receives one UTT.pwt file per utterance.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct FrameTargetsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    kmeans: KMeansArgs,
    /// Output directory; receives one UTT.pwt file per utterance.
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the frame codebook here.
    #[arg(long)]
    codebook_out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Single,
    Hierarchical,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Single => Variant::Single,
            VariantArg::Hierarchical => Variant::Hierarchical,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (JSON with model, trainer, masking and quantizer sections).
    /// Without it, defaults are used with input_dim taken from the corpus.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of pseudo word-level targets.
    #[arg(long)]
    targets: PathBuf,
    /// Directory of frame-level targets; required for the hierarchical variant.
    #[arg(long)]
    frame_targets: Option<PathBuf>,
    /// Overrides the configured variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for metrics.jsonl, checkpoints/ and final.pwm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GradcheckVariant {
    Single,
    Hierarchical,
    Both,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradcheckVariant::Both)]
    variant: GradcheckVariant,
    /// Frame-loss weight for the hierarchical check.
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalSemArgs {
    /// Model checkpoint (PWM1).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pairs CSV (utt_a,utt_b,human_score); feature paths are relative to its directory.
    #[arg(long)]
    pairs: PathBuf,
    /// Representation depth to pool; defaults to the word-level head's depth.
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalClusterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of targets to score.
    #[arg(long)]
    targets: PathBuf,
}

#[derive(Args, Debug)]
struct EvalBoundaryArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Hypothesis segment file.
    #[arg(long)]
    segments: PathBuf,
    /// Reference segment file; defaults to the manifest's reference segmentation.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Matching tolerance in frames.
    #[arg(long, default_value_t = 2)]
    tol: usize,
}

fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let m = Manifest::read(manifest)?;
    let utts = m.load()?;
    if utts.is_empty() {
        bail!(pwhubert::Error::MissingInput(format!("{} lists no utterances", manifest.display())));
    }
    Ok(utts)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        vocab_size: a.vocab,
        word_len_range: (a.min_word_len, a.max_word_len),
        words_per_utt_range: (a.min_words, a.max_words),
        feature_dim: a.feature_dim,
        noise_sigma: a.noise,
        n_utterances: a.utterances,
        seed: a.seed,
    };
    let utts = synth_corpus(&cfg)?;
    write_corpus(&a.out, &utts)?;
    if a.pairs > 0 {
        write_word_pairs(&a.out.join("pairs"), &synth_word_pairs(&cfg, a.pairs)?)?;
    }
    print_json(&serde_json::json!({
        "manifest": a.out.join("manifest.json"),
        "utterances": utts.len(),
        "frames": utts.iter().map(Utterance::frames).sum::<usize>(),
    }))
}

fn segment(a: SegmentArgs) -> Result<()> {
    let records = match &a.manifest {
        Some(m) => segment_corpus(&load_corpus(m)?, a.threshold)?,
        None => a
            .attn
            .iter()
            .map(|path| {
                let m = read_matrix(path)?;
                if m.cols() != 1 {
                    bail!(pwhubert::Error::Shape(format!(
                        "{}: attention must have one column, found {}",
                        path.display(),
                        m.cols()
                    )));
                }
                let attn = AttentionWeights::new(m.data().iter().map(|&v| v as f64).collect())?;
                let utt = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(SegmentRecord {
                    utt,
                    segments: pseudo_word_boundaries(&attn, a.threshold)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    write_segments(&a.out, &records)?;
    print_json(&serde_json::json!({
        "utterances": records.len(),
        "segments": records.iter().map(|r| r.segments.len()).sum::<usize>(),
    }))
}

fn fit(a: FitCodebookArgs) -> Result<()> {
    let utts = load_corpus(&a.manifest)?;
    let records = match &a.segments {
        Some(p) => read_segments(p)?,
        None => oracle_records(&utts),
    };
    let fit = fit_codebook(&utts, &records, &a.kmeans.config())?;
    write_codebook(&a.out, &fit.codebook)?;
    print_json(&serde_json::json!({
        "k": fit.codebook.k(),
        "dim": fit.codebook.dim(),
        "inertia": fit.codebook.inertia,
        "iterations": fit.iterations,
    }))
}

fn targets(a: TargetsArgs) -> Result<()> {
    let mode = TargetMode::from(a.mode);
    let codebook = match (&a.codebook, mode) {
        (Some(p), _) => Some(read_codebook(p)?),
        (None, TargetMode::OracleId) => None,
        (None, _) => return Err(usage("--codebook is required unless --mode oracle-id")),
    };
    let utts = load_corpus(&a.manifest)?;
    let t = corpus_targets(&utts, mode, codebook.as_ref(), a.threshold)?;
    write_target_dir(&a.out_dir, &utts, &t)?;
    print_json(&serde_json::json!({
        "utterances": utts.len(),
        "quality": target_quality(&utts, &t)?,
    }))
}

fn frame_targets(a: FrameTargetsArgs) -> Result<()> {
    let utts = load_corpus(&a.manifest)?;
    let (cb, t) = corpus_frame_targets(&utts, &a.kmeans.config())?;
    write_target_dir(&a.out_dir, &utts, &t)?;
    if let Some(p) = &a.codebook_out {
        write_codebook(p, &cb)?;
    }
    print_json(&serde_json::json!({ "utterances": utts.len(), "k": cb.k(), "inertia": cb.inertia }))
}

fn train(a: TrainArgs) -> Result<()> {
    let utts = load_corpus(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => {
            let mut c = RunConfig::default();
            c.model.input_dim = utts[0].feats.cols();
            c
        }
    };
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if let Some(s) = a.seed {
        cfg.trainer.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.trainer.max_steps = Some(n);
    }
    let pw = read_target_dir(&a.targets, &utts)?;
    let frame = match (&a.frame_targets, cfg.model.variant) {
        (Some(d), _) => Some(read_target_dir(d, &utts)?),
        (None, Variant::Hierarchical) if cfg.trainer.frame_loss => {
            return Err(usage("--frame-targets is required for the hierarchical variant"))
        }
        (None, _) => None,
    };
    let examples = training_examples(&utts, &pw, frame.as_deref())?;
    let out = run_training(&cfg, &examples, Some(&a.out)).context("training failed")?;
    let last = out.metrics.last();
    print_json(&serde_json::json!({
        "steps": out.metrics.len(),
        "final": last,
        "metrics": a.out.join(METRICS_FILE),
        "checkpoint": a.out.join(FINAL_CHECKPOINT),
    }))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let variants: &[Variant] = match a.variant {
        GradcheckVariant::Single => &[Variant::Single],
        GradcheckVariant::Hierarchical => &[Variant::Hierarchical],
        GradcheckVariant::Both => &[Variant::Single, Variant::Hierarchical],
    };
    let mut failed = Vec::new();
    for &v in variants {
        let lambda = if v == Variant::Hierarchical { a.lambda } else { 1.0 };
        let rep = gradcheck_toy(v, lambda, a.seed, a.eps)?;
        print_json(&serde_json::json!({ "variant": v.to_string(), "report": rep, "pass": rep.passes(a.tol) }))?;
        if !rep.passes(a.tol) {
            failed.push(v.to_string());
        }
    }
    if !failed.is_empty() {
        bail!(pwhubert::Error::NonFinite(format!(
            "gradient check above tolerance {} for {}",
            a.tol,
            failed.join(", ")
        )));
    }
    Ok(())
}

fn eval_sem(a: EvalSemArgs) -> Result<()> {
    let (params, meta) = read_checkpoint(&a.checkpoint)?;
    let root = a.pairs.parent().unwrap_or(Path::new(""));
    let pairs = read_pairs(&a.pairs)?
        .into_iter()
        .map(|p| {
            Ok(WordPair {
                a: read_matrix(&root.join(&p.utt_a))?,
                b: read_matrix(&root.join(&p.utt_b))?,
                human_score: p.human_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layer = a.layer.unwrap_or_else(|| meta.model.pw_depth());
    let rep = similarity_judgement(&params, &meta.model, &pairs, layer)?;
    print_json(&serde_json::json!({ "spearman": rep.spearman, "layer": rep.layer, "pairs": rep.pairs }))
}

fn eval_cluster(a: EvalClusterArgs) -> Result<()> {
    let utts = load_corpus(&a.manifest)?;
    let t = read_target_dir(&a.targets, &utts)?;
    print_json(&target_quality(&utts, &t)?)
}

fn eval_boundary(a: EvalBoundaryArgs) -> Result<()> {
    let utts = load_corpus(&a.manifest)?;
    let hyp = read_segments(&a.segments)?;
    let reference = match &a.reference {
        Some(p) => read_segments(p)?,
        None => oracle_records(&utts),
    };
    let pairs = utts
        .iter()
        .map(|u| Ok((find_segments(&hyp, &u.utt_id)?, find_segments(&reference, &u.utt_id)?)))
        .collect::<Result<Vec<_>>>()?;
    print_json(&corpus_boundary_f1(pairs, a.tol))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Segment(a) => segment(a),
        Command::FitCodebook(a) => fit(a),
        Command::Targets(a) => targets(a),
        Command::FrameTargets(a) => frame_targets(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::EvalSem(a) => eval_sem(a),
        Command::EvalCluster(a) => eval_cluster(a),
        Command::EvalBoundary(a) => eval_boundary(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<pwhubert::Error>() {
        Some(e) if !e.is_data_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
