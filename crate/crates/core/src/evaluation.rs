//! Rank correlation, clustering quality, masked accuracy and boundary scores.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::model::{hidden_states, ModelConfig, ModelParams};
use crate::numerics::{Real, Tensor2D};
use crate::quantizer::TargetSequence;
use crate::segmentation::SegmentList;
use crate::trainer::scored_frames;

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..j hold rank values i+1..=j.
        let r = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!(
            "correlation needs two equal sequences of length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman's rho: Pearson correlation of tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    if xs.len() != ys.len() || xs.len() < 2 {
        return pearson(xs, ys);
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn dense_ids<K: Ord>(keys: &[K]) -> BTreeMap<&K, usize> {
    let mut m = BTreeMap::new();
    for k in keys {
        let next = m.len();
        m.entry(k).or_insert(next);
    }
    m
}

fn contingency<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<BTreeMap<(usize, usize), usize>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "label sequences of length {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let pi = dense_ids(pred);
    let ti = dense_ids(truth);
    let mut table = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth) {
        *table.entry((pi[&p], ti[&t])).or_insert(0) += 1;
    }
    Ok(table)
}

/// Normalised mutual information with arithmetic-mean normalisation. Two constant
/// labelings count as identical (1.0); one constant labeling scores 0.
pub fn nmi<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(p, t), &c) in &table {
        *rows.entry(p).or_insert(0) += c;
        *cols.entry(t).or_insert(0) += c;
    }
    let hp = entropy(rows.values().copied(), n);
    let ht = entropy(cols.values().copied(), n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = table
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / n * (c * n / (rows[&p] as f64 * cols[&t] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (hp + ht)).clamp(0.0, 1.0))
}

/// Fraction of items whose predicted cluster's majority truth label matches their own.
pub fn purity<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(p, _), &c) in &table {
        let b = best.entry(p).or_insert(0);
        *b = (*b).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / pred.len() as f64)
}

/// Fraction of masked, non-IGNORE frames whose argmax matches the target. Ties go to
/// the lowest class index.
pub fn masked_accuracy<T: Real>(logits: &Tensor2D<T>, targets: &TargetSequence, mask: &MaskSet) -> Result<f64> {
    if logits.rows() != targets.len() || mask.frames() != targets.len() {
        return Err(Error::Shape(format!(
            "logits rows {}, targets {}, mask frames {}",
            logits.rows(),
            targets.len(),
            mask.frames()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (t, label) in scored_frames(targets, mask) {
        let row = logits.row(t);
        let mut arg = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[arg] {
                arg = c;
            }
        }
        hit += usize::from(arg == label as usize);
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Sorted, deduplicated segment starts and ends.
pub fn boundary_positions(segs: &SegmentList) -> Vec<usize> {
    let mut b: Vec<usize> = segs.iter().flat_map(|s| [s.start, s.end]).collect();
    b.sort_unstable();
    b.dedup();
    b
}

/// Match counts behind a [`BoundaryScore`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BoundaryCounts {
    pub matched: usize,
    pub hyp: usize,
    pub reference: usize,
}

impl BoundaryCounts {
    pub fn add(&mut self, other: BoundaryCounts) {
        self.matched += other.matched;
        self.hyp += other.hyp;
        self.reference += other.reference;
    }

    /// Both sides empty scores 1; one side empty scores 0.
    pub fn score(&self) -> BoundaryScore {
        if self.hyp == 0 && self.reference == 0 {
            return BoundaryScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
        let precision = ratio(self.matched, self.hyp);
        let recall = ratio(self.matched, self.reference);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BoundaryScore { precision, recall, f1 }
    }
}

/// Greedy one-to-one matching of sorted boundary positions within `±tol`: each
/// hypothesis, in ascending order, takes the earliest unmatched reference in range.
pub fn boundary_counts(hyp: &[usize], reference: &[usize], tol: usize) -> BoundaryCounts {
    let mut used = vec![false; reference.len()];
    let mut matched = 0usize;
    for &h in hyp {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].abs_diff(h) <= tol) {
            used[j] = true;
            matched += 1;
        }
    }
    BoundaryCounts {
        matched,
        hyp: hyp.len(),
        reference: reference.len(),
    }
}

pub fn boundary_scores(hyp: &[usize], reference: &[usize], tol: usize) -> BoundaryScore {
    boundary_counts(hyp, reference, tol).score()
}

/// Scores pooled over utterances: match counts are summed before the ratios are taken.
pub fn corpus_boundary_f1<'a>(
    pairs: impl IntoIterator<Item = (&'a SegmentList, &'a SegmentList)>,
    tol: usize,
) -> BoundaryScore {
    let mut total = BoundaryCounts::default();
    for (h, r) in pairs {
        total.add(boundary_counts(&boundary_positions(h), &boundary_positions(r), tol));
    }
    total.score()
}

pub fn boundary_f1(hyp: &SegmentList, reference: &SegmentList, tol: usize) -> BoundaryScore {
    boundary_scores(&boundary_positions(hyp), &boundary_positions(reference), tol)
}

/// Mean over frames of the unmasked hidden state at `layer`.
pub fn embed_word(params: &ModelParams<f32>, cfg: &ModelConfig, feats: &Tensor2D<f32>, layer: usize) -> Result<Vec<f64>> {
    if feats.rows() == 0 {
        return Err(Error::MissingInput("empty feature matrix".into()));
    }
    if layer > cfg.total_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} above the top layer {}",
            cfg.total_layers()
        )));
    }
    let hs = hidden_states(params, cfg, feats)?;
    Ok(hs[layer].column_means().iter().map(|&v| v as f64).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// A word pair with its human similarity score.
#[derive(Clone, Debug)]
pub struct WordPair {
    pub a: Tensor2D<f32>,
    pub b: Tensor2D<f32>,
    pub human_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub spearman: f64,
    pub layer: usize,
    pub pairs: usize,
    /// Model cosine similarity per pair, in input order.
    pub similarities: Vec<f64>,
}

/// Spearman correlation between per-pair cosine similarities of mean-pooled
/// representations and the human scores.
pub fn similarity_judgement(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    pairs: &[WordPair],
    layer: usize,
) -> Result<SimilarityReport> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 pairs, got {}", pairs.len())));
    }
    let sims = crate::parallel::map_chunks(pairs.len(), 1, |i, _| {
        let p = &pairs[i];
        Ok::<_, Error>(cosine(
            &embed_word(params, cfg, &p.a, layer)?,
            &embed_word(params, cfg, &p.b, layer)?,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let human: Vec<f64> = pairs.iter().map(|p| p.human_score).collect();
    Ok(SimilarityReport {
        spearman: spearman(&sims, &human)?,
        layer,
        pairs: pairs.len(),
        similarities: sims,
    })
}
