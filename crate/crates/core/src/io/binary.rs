//! Little-endian binary formats: `PWF1` matrices, `PWT1` targets, `PWC1` codebooks and
//! `PWM1` checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor2D;
use crate::quantizer::{Codebook, TargetSequence};

pub const MATRIX_MAGIC: &[u8; 4] = b"PWF1";
pub const TARGETS_MAGIC: &[u8; 4] = b"PWT1";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"PWC1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PWM1";

type Decoded<T> = std::result::Result<T, FormatError>;

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Decoded<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                needed: n - left,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Decoded<()> {
        let found = self.buf.get(..4).unwrap_or(self.buf);
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn u8(&mut self) -> Decoded<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Decoded<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Decoded<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Decoded<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `count` values of `width` bytes; the size is checked before anything is read.
    fn array(&mut self, count: u64, width: usize, at: usize) -> Decoded<&'a [u8]> {
        let bytes = count
            .checked_mul(width as u64)
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| FormatError::DimOverflow {
                offset: at,
                detail: format!("{count} elements of {width} bytes"),
            })?;
        self.take(bytes)
    }

    fn f32s(&mut self, count: u64, at: usize) -> Decoded<Vec<f32>> {
        Ok(self
            .array(count, 4, at)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Decoded<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed {
                offset: self.pos,
                detail: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in 32 bits")))
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn at_path<T>(path: &Path, r: Decoded<T>) -> Result<T> {
    r.map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_matrix(m: &Tensor2D<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + m.data().len() * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&dim_u32(m.rows(), "rows")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.cols(), "cols")?.to_le_bytes());
    put_f32s(&mut out, m.data());
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Decoded<Tensor2D<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(MATRIX_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f32s(rows as u64 * cols as u64, 4)?;
    r.finish()?;
    Ok(Tensor2D::from_vec(rows, cols, data).expect("sized by header"))
}

pub fn write_matrix(path: &Path, m: &Tensor2D<f32>) -> Result<()> {
    write_file(path, &encode_matrix(m)?)
}

pub fn read_matrix(path: &Path) -> Result<Tensor2D<f32>> {
    at_path(path, decode_matrix(&read_file(path)?))
}

pub fn encode_targets(t: &TargetSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + t.len() * 4);
    out.extend_from_slice(TARGETS_MAGIC);
    out.extend_from_slice(&dim_u32(t.len(), "frames")?.to_le_bytes());
    for l in &t.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_targets(bytes: &[u8]) -> Decoded<TargetSequence> {
    let mut r = Reader::new(bytes);
    r.magic(TARGETS_MAGIC)?;
    let frames = r.u32()?;
    let labels = r
        .array(frames as u64, 4, 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    Ok(TargetSequence::new(labels))
}

pub fn write_targets(path: &Path, t: &TargetSequence) -> Result<()> {
    write_file(path, &encode_targets(t)?)
}

pub fn read_targets(path: &Path) -> Result<TargetSequence> {
    at_path(path, decode_targets(&read_file(path)?))
}

/// The codebook seed is not stored; decoded codebooks report seed 0.
pub fn encode_codebook(cb: &Codebook) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + cb.centroids.data().len() * 4);
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&dim_u32(cb.k(), "k")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(cb.dim(), "dim")?.to_le_bytes());
    put_f32s(&mut out, cb.centroids.data());
    out.extend_from_slice(&cb.inertia.to_le_bytes());
    Ok(out)
}

pub fn decode_codebook(bytes: &[u8]) -> Decoded<Codebook> {
    let mut r = Reader::new(bytes);
    r.magic(CODEBOOK_MAGIC)?;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = r.f32s(k as u64 * dim as u64, 4)?;
    let inertia = r.f64()?;
    r.finish()?;
    let centroids = Tensor2D::from_vec(k, dim, data).expect("sized by header");
    Codebook::new(centroids, inertia, 0).map_err(|e| FormatError::Malformed {
        offset: 4,
        detail: e.to_string(),
    })
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    write_file(path, &encode_codebook(cb)?)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    at_path(path, decode_codebook(&read_file(path)?))
}

/// JSON trailer of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: usize,
}

pub fn encode_checkpoint(params: &ModelParams<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&dim_u32(named.len(), "tensor count")?.to_le_bytes());
    for p in &named {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Shape(format!("tensor name {} too long", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(2);
        out.extend_from_slice(&dim_u32(p.tensor.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&dim_u32(p.tensor.cols(), "cols")?.to_le_bytes());
        put_f32s(&mut out, p.tensor.data());
    }
    out.extend_from_slice(&serde_json::to_vec(meta)?);
    Ok(out)
}

/// Named tensors plus trailer, without checking them against a model layout.
pub fn decode_checkpoint_raw(bytes: &[u8]) -> Decoded<(Vec<(String, Tensor2D<f32>)>, CheckpointMeta)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FormatError::Malformed {
                offset: at + 2,
                detail: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as u64);
        }
        let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            FormatError::DimOverflow {
                offset: rank_at,
                detail: format!("dims {dims:?}"),
            }
        })?;
        let (rows, cols) = match dims[..] {
            [] => (1, 1),
            [n] => (1, n as usize),
            [a, b] => (a as usize, b as usize),
            _ => {
                return Err(FormatError::Malformed {
                    offset: rank_at,
                    detail: format!("rank {rank} tensor {name}"),
                })
            }
        };
        let data = r.f32s(count, rank_at)?;
        tensors.push((name, Tensor2D::from_vec(rows, cols, data).expect("sized by header")));
    }
    let footer_at = r.pos;
    let meta = serde_json::from_slice(&bytes[footer_at..]).map_err(|e| FormatError::Malformed {
        offset: footer_at,
        detail: format!("checkpoint trailer: {e}"),
    })?;
    Ok((tensors, meta))
}

/// Rebuilds parameters for the stored configuration and checks every tensor.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let (tensors, meta) = decode_checkpoint_raw(bytes).map_err(|source| Error::Format {
        path: "<checkpoint>".into(),
        source,
    })?;
    let mut params = ModelParams::init(&meta.model, 0)?;
    params.load_named(&tensors)?;
    Ok((params, meta))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams<f32>, meta: &CheckpointMeta) -> Result<()> {
    write_file(path, &encode_checkpoint(params, meta)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let bytes = read_file(path)?;
    let (tensors, meta) = at_path(path, decode_checkpoint_raw(&bytes))?;
    let mut params = ModelParams::init(&meta.model, 0)?;
    params.load_named(&tensors)?;
    Ok((params, meta))
}
