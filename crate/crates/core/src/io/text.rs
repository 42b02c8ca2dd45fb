//! Line-oriented and JSON text formats: segment files, word-ID files, pair lists,
//! metrics logs and the run configuration.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::binary::write_file;
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::model::ModelConfig;
use crate::quantizer::KMeansConfig;
use crate::segmentation::SegmentList;
use crate::trainer::{StepMetrics, TrainConfig};

/// One line of a segment file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub utt: String,
    pub segments: SegmentList,
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidSegments(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_segments(path: &Path, records: &[SegmentRecord]) -> Result<()> {
    write_file(path, &jsonl_bytes(records)?)
}

pub fn read_segments(path: &Path) -> Result<Vec<SegmentRecord>> {
    read_jsonl(path)
}

/// Looks up the record for `utt`.
pub fn find_segments<'a>(records: &'a [SegmentRecord], utt: &str) -> Result<&'a SegmentList> {
    records
        .iter()
        .find(|r| r.utt == utt)
        .map(|r| &r.segments)
        .ok_or_else(|| Error::MissingInput(format!("segments for utterance {utt}")))
}

/// Word IDs are stored as a JSON array, one per oracle segment.
pub fn write_word_ids(path: &Path, ids: &[u32]) -> Result<()> {
    write_file(path, &serde_json::to_vec(ids)?)
}

pub fn read_word_ids(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Row of a pairs file: two feature-file paths and a human similarity score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub utt_a: String,
    pub utt_b: String,
    pub human_score: f64,
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in pairs {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["utt_a", "utt_b", "human_score"] {
        return Err(Error::MissingInput(format!(
            "{}: header must be utt_a,utt_b,human_score",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Appends one metrics line per step.
pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    read_jsonl(path)
}

/// Every tunable of a run, as stored in the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub masking: MaskConfig,
    pub quantizer: KMeansConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.masking.validate()
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(cfg)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("segs.jsonl");
        let recs = vec![
            SegmentRecord {
                utt: "a".into(),
                segments: SegmentList::from_pairs(&[(0, 3), (4, 9)]).unwrap(),
            },
            SegmentRecord {
                utt: "b".into(),
                segments: SegmentList::empty(),
            },
        ];
        write_segments(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "{\"utt\":\"a\",\"segments\":[[0,3],[4,9]]}\n{\"utt\":\"b\",\"segments\":[]}\n"
        );
        assert_eq!(read_segments(&p).unwrap(), recs);
        assert!(find_segments(&recs, "c").is_err());
    }

    #[test]
    fn overlapping_segments_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"utt\":\"a\",\"segments\":[[0,3],[3,5]]}\n").unwrap();
        assert!(matches!(read_segments(&p), Err(Error::InvalidSegments(_))));
    }

    #[test]
    fn pairs_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        let pairs = vec![PairRecord {
            utt_a: "w/a.pwf".into(),
            utt_b: "w/b.pwf".into(),
            human_score: 0.25,
        }];
        write_pairs(&p, &pairs).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("utt_a,utt_b,human_score\n"));
        assert_eq!(read_pairs(&p).unwrap(), pairs);
        std::fs::write(&p, "a,b,score\nx,y,1\n").unwrap();
        assert!(read_pairs(&p).is_err());
    }

    #[test]
    fn metrics_lines_keep_field_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        let m = StepMetrics {
            step: 3,
            lr: 0.5,
            loss_pw: 1.25,
            loss_frame: 0.0,
            total: 1.25,
        };
        w.write(&m).unwrap();
        w.finish().unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "{\"step\":3,\"lr\":0.5,\"loss_pw\":1.25,\"loss_frame\":0.0,\"total\":1.25}\n"
        );
        assert_eq!(read_metrics(&p).unwrap(), vec![m]);
    }

    #[test]
    fn config_defaults_fill_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"trainer": {"total_steps": 500}, "model": {"variant": "single"}}"#).unwrap();
        let c = read_config(&p).unwrap();
        assert_eq!(c.trainer.total_steps, 500);
        assert_eq!(c.trainer.warmup_steps, 100);
        assert_eq!(c.masking, MaskConfig::default());
        std::fs::write(&p, r#"{"trainer": {"warmup_steps": 0}}"#).unwrap();
        assert!(read_config(&p).is_err());
    }
}
