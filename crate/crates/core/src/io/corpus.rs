//! Corpus manifests and the synthetic corpus generator.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::binary::{read_matrix, write_file, write_matrix};
use super::text::{read_segments, read_word_ids, write_pairs, write_segments, write_word_ids, PairRecord, SegmentRecord};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor2D};
use crate::parallel::map_chunks;
use crate::segmentation::{AttentionWeights, Segment, SegmentList};

/// One utterance's files, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub features: String,
    pub oracle_segments: String,
    pub oracle_ids: String,
    pub attention: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.entries)?;
        bytes.push(b'\n');
        write_file(path, &bytes)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Reads every referenced file and checks lengths agree per utterance.
    pub fn load(&self) -> Result<Vec<Utterance>> {
        let loaded = map_chunks(self.entries.len(), 1, |i, _| self.load_entry(&self.entries[i]));
        loaded.into_iter().collect()
    }

    fn load_entry(&self, e: &ManifestEntry) -> Result<Utterance> {
        let feats = read_matrix(&self.resolve(&e.features))?;
        let attn = read_matrix(&self.resolve(&e.attention))?;
        if attn.cols() != 1 || attn.rows() != feats.rows() {
            return Err(Error::Shape(format!(
                "{}: attention is {}x{}, expected {}x1",
                e.utt_id,
                attn.rows(),
                attn.cols(),
                feats.rows()
            )));
        }
        let attention = AttentionWeights::new(attn.data().iter().map(|&v| v as f64).collect())?;
        let records = read_segments(&self.resolve(&e.oracle_segments))?;
        let oracle_segments = match &records[..] {
            [r] => r.segments.clone(),
            _ => {
                return Err(Error::InvalidSegments(format!(
                    "{}: expected one segment record, found {}",
                    e.utt_id,
                    records.len()
                )))
            }
        };
        if !oracle_segments.partitions(feats.rows()) {
            return Err(Error::InvalidSegments(format!(
                "{}: oracle segments do not cover all {} frames",
                e.utt_id,
                feats.rows()
            )));
        }
        let oracle_ids = read_word_ids(&self.resolve(&e.oracle_ids))?;
        if oracle_ids.len() != oracle_segments.len() {
            return Err(Error::Shape(format!(
                "{}: {} word ids for {} segments",
                e.utt_id,
                oracle_ids.len(),
                oracle_segments.len()
            )));
        }
        Ok(Utterance {
            utt_id: e.utt_id.clone(),
            feats,
            attention,
            oracle_segments,
            oracle_ids,
        })
    }
}

/// An utterance with everything the pipeline can use.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub feats: Tensor2D<f32>,
    pub attention: AttentionWeights,
    pub oracle_segments: SegmentList,
    pub oracle_ids: Vec<u32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.feats.rows()
    }

    /// True word ID of every frame.
    pub fn frame_word_ids(&self) -> Vec<u32> {
        let mut out = vec![0; self.frames()];
        for (s, &id) in self.oracle_segments.iter().zip(&self.oracle_ids) {
            out[s.start..=s.end].fill(id);
        }
        out
    }
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    /// Inclusive frame-count range of a word.
    pub word_len_range: (usize, usize),
    pub words_per_utt_range: (usize, usize),
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub n_utterances: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            word_len_range: (6, 12),
            words_per_utt_range: (3, 6),
            feature_dim: 16,
            noise_sigma: 0.05,
            n_utterances: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        let (wl, wh) = self.word_len_range;
        let (ul, uh) = self.words_per_utt_range;
        if wl > wh || ul > uh || ul == 0 {
            return bad("ranges must be non-empty with at least one word per utterance");
        }
        if wl < 3 {
            return bad("words need at least 3 frames so the attention core stays inside the word");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

/// Word prototypes: each a fixed sequence of unit-norm frame vectors.
pub fn synth_vocabulary(cfg: &SynthConfig) -> Result<Vec<Tensor2D<f32>>> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, "vocab");
    let (lo, hi) = cfg.word_len_range;
    Ok((0..cfg.vocab_size)
        .map(|_| {
            let len = rng.range_inclusive(lo, hi);
            let mut w = Tensor2D::zeros(len, cfg.feature_dim);
            for t in 0..len {
                let v: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for (dst, x) in w.row_mut(t).iter_mut().zip(&v) {
                    *dst = (x / norm) as f32;
                }
            }
            w
        })
        .collect())
}

/// Frames of attention margin on each side of a word of `len` frames.
pub fn attention_margin(len: usize) -> usize {
    ((0.2 * len as f64).round() as usize).max(1)
}

/// A prototype plus Gaussian noise.
fn noisy(proto: &Tensor2D<f32>, sigma: f64, rng: &mut RngStream) -> Tensor2D<f32> {
    let mut out = proto.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng.normal()) as f32;
    }
    out
}

/// Draws one utterance from `RngStream(seed, utt_id)`.
pub fn synth_utterance(cfg: &SynthConfig, vocab: &[Tensor2D<f32>], utt_id: &str) -> Utterance {
    let mut rng = RngStream::new(cfg.seed, utt_id);
    let n_words = rng.range_inclusive(cfg.words_per_utt_range.0, cfg.words_per_utt_range.1);
    let ids: Vec<u32> = (0..n_words).map(|_| rng.below(vocab.len()) as u32).collect();
    let frames: usize = ids.iter().map(|&w| vocab[w as usize].rows()).sum();
    let mut feats = Tensor2D::zeros(frames, cfg.feature_dim);
    let mut attn = vec![0.0; frames];
    let mut segs = Vec::with_capacity(n_words);
    let mut t0 = 0;
    for &w in &ids {
        let word = noisy(&vocab[w as usize], cfg.noise_sigma, &mut rng);
        let len = word.rows();
        for t in 0..len {
            feats.row_mut(t0 + t).copy_from_slice(word.row(t));
        }
        let m = attention_margin(len);
        attn[t0 + m..t0 + len - m].fill(1.0);
        segs.push(Segment::new(t0, t0 + len - 1));
        t0 += len;
    }
    Utterance {
        utt_id: utt_id.to_string(),
        feats,
        attention: AttentionWeights::new(attn).expect("values are 0 or 1"),
        oracle_segments: SegmentList::new(segs).expect("contiguous by construction"),
        oracle_ids: ids,
    }
}

pub fn utt_name(i: usize) -> String {
    format!("utt{i:05}")
}

/// Generates the corpus in memory.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    let vocab = synth_vocabulary(cfg)?;
    Ok(map_chunks(cfg.n_utterances, 1, |i, _| synth_utterance(cfg, &vocab, &utt_name(i))))
}

/// Writes `utts` under `dir` and returns the manifest (also written to
/// `dir/manifest.json`).
pub fn write_corpus(dir: &Path, utts: &[Utterance]) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let e = ManifestEntry {
            utt_id: u.utt_id.clone(),
            features: format!("features/{}.pwf", u.utt_id),
            oracle_segments: format!("segments/{}.jsonl", u.utt_id),
            oracle_ids: format!("word_ids/{}.json", u.utt_id),
            attention: format!("attention/{}.pwf", u.utt_id),
        };
        write_matrix(&dir.join(&e.features), &u.feats)?;
        let attn = Tensor2D::from_vec(
            u.frames(),
            1,
            u.attention.values().iter().map(|&v| v as f32).collect(),
        )?;
        write_matrix(&dir.join(&e.attention), &attn)?;
        write_segments(
            &dir.join(&e.oracle_segments),
            &[SegmentRecord {
                utt: u.utt_id.clone(),
                segments: u.oracle_segments.clone(),
            }],
        )?;
        write_word_ids(&dir.join(&e.oracle_ids), &u.oracle_ids)?;
        entries.push(e);
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Generates and writes a corpus; returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let utts = synth_corpus(cfg)?;
    write_corpus(dir, &utts)?;
    Ok(dir.join("manifest.json"))
}

/// An isolated word token pair for similarity judgement.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub a: Tensor2D<f32>,
    pub b: Tensor2D<f32>,
    pub same_word: bool,
}

/// `n_pairs` pairs of noisy isolated words; even-numbered pairs repeat one word,
/// odd-numbered pairs use two different words.
pub fn synth_word_pairs(cfg: &SynthConfig, n_pairs: usize) -> Result<Vec<SynthPair>> {
    let vocab = synth_vocabulary(cfg)?;
    Ok(map_chunks(n_pairs, 1, |i, _| {
        let mut rng = RngStream::new(cfg.seed, &format!("pair{i:05}"));
        let wa = rng.below(vocab.len());
        let same = i % 2 == 0;
        let wb = if same {
            wa
        } else {
            (wa + 1 + rng.below(vocab.len() - 1)) % vocab.len()
        };
        SynthPair {
            a: noisy(&vocab[wa], cfg.noise_sigma, &mut rng),
            b: noisy(&vocab[wb], cfg.noise_sigma, &mut rng),
            same_word: same,
        }
    }))
}

/// Writes word features under `dir/words/` and `dir/pairs.csv` (paths relative to
/// `dir`); same-word pairs get human score 1, others 0.
pub fn write_word_pairs(dir: &Path, pairs: &[SynthPair]) -> Result<PathBuf> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let a = format!("words/pair{i:05}_a.pwf");
        let b = format!("words/pair{i:05}_b.pwf");
        write_matrix(&dir.join(&a), &p.a)?;
        write_matrix(&dir.join(&b), &p.b)?;
        rows.push(PairRecord {
            utt_a: a,
            utt_b: b,
            human_score: if p.same_word { 1.0 } else { 0.0 },
        });
    }
    let path = dir.join("pairs.csv");
    write_pairs(&path, &rows)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::detect_segments;

    fn small() -> SynthConfig {
        SynthConfig {
            n_utterances: 6,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_segments_partition_every_utterance() {
        for u in synth_corpus(&small()).unwrap() {
            assert!(u.oracle_segments.partitions(u.frames()));
            assert_eq!(u.oracle_ids.len(), u.oracle_segments.len());
        }
    }

    #[test]
    fn attention_runs_sit_strictly_inside_words() {
        for u in synth_corpus(&small()).unwrap() {
            let det = detect_segments(&u.attention, 0.8).unwrap();
            assert_eq!(det.len(), u.oracle_segments.len());
            for (d, o) in det.iter().zip(&u.oracle_segments) {
                assert!(d.start > o.start && d.end < o.end, "{d:?} inside {o:?}");
            }
        }
    }

    #[test]
    fn noiseless_repeats_are_identical() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let vocab = synth_vocabulary(&cfg).unwrap();
        let a = synth_utterance(&cfg, &vocab, "x");
        let b = synth_utterance(&cfg, &vocab, "x");
        assert_eq!(a, b);
        // Same word drawn in two places yields the same frames.
        let proto = |id: u32| vocab[id as usize].clone();
        let seg = a.oracle_segments.as_slice()[0];
        let mut got = Tensor2D::zeros(seg.len(), cfg.feature_dim);
        for t in 0..seg.len() {
            got.row_mut(t).copy_from_slice(a.feats.row(seg.start + t));
        }
        assert_eq!(got, proto(a.oracle_ids[0]));
    }

    #[test]
    fn written_corpus_reloads_and_is_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_generate(&small(), d1.path()).unwrap();
        synth_generate(&small(), d2.path()).unwrap();
        let loaded = Manifest::read(&m1).unwrap().load().unwrap();
        assert_eq!(loaded, synth_corpus(&small()).unwrap());
        for e in &Manifest::read(&m1).unwrap().entries {
            for rel in [&e.features, &e.attention, &e.oracle_segments, &e.oracle_ids] {
                assert_eq!(
                    std::fs::read(d1.path().join(rel)).unwrap(),
                    std::fs::read(d2.path().join(rel)).unwrap()
                );
            }
        }
    }

    #[test]
    fn word_pairs_alternate_same_and_different() {
        let pairs = synth_word_pairs(&small(), 6).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.same_word, i % 2 == 0);
            if p.same_word {
                assert_eq!(p.a.shape(), p.b.shape());
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let csv = write_word_pairs(dir.path(), &pairs).unwrap();
        assert_eq!(super::super::text::read_pairs(&csv).unwrap().len(), 6);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { vocab_size: 1, ..small() },
            SynthConfig { word_len_range: (2, 5), ..small() },
            SynthConfig { words_per_utt_range: (4, 3), ..small() },
            SynthConfig { noise_sigma: -1.0, ..small() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
