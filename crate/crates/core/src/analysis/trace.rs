//! Binary attention-trace container and IO.
//!
//! File layout (little-endian): magic `ATRC`, version `u32 = 1`, then
//! `layers`, `heads`, `seq_len` as `u32`, followed by `layers * heads`
//! row-major `seq_len x seq_len` matrices of `f32`, layer-major then
//! head-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::math::Matrix;

pub const TRACE_MAGIC: [u8; 4] = *b"ATRC";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("declared dimensions overflow")]
    DimensionOverflow,
    #[error("trace shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialized per-layer, per-head causal attention matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    seq_len: usize,
    mats: Vec<Matrix>,
}

impl AttentionTrace {
    pub fn new(
        layers: usize,
        heads: usize,
        seq_len: usize,
        mats: Vec<Matrix>,
    ) -> Result<Self, TraceError> {
        if mats.len() != layers * heads {
            return Err(TraceError::ShapeMismatch(format!(
                "{} matrices for {layers} layers x {heads} heads",
                mats.len()
            )));
        }
        for m in &mats {
            if m.rows() != seq_len || m.cols() != seq_len {
                return Err(TraceError::ShapeMismatch(format!(
                    "matrix is {}x{}, expected {seq_len}x{seq_len}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            mats,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn mat(&self, layer: usize, head: usize) -> &Matrix {
        &self.mats[layer * self.heads + head]
    }

    pub fn layer_mats(&self, layer: usize) -> &[Matrix] {
        &self.mats[layer * self.heads..(layer + 1) * self.heads]
    }

    /// Check the causal structure: cells above the diagonal are zero and each
    /// row sums to 1 over its allowed prefix (within 1e-3).
    pub fn validate(&self) -> Result<(), TraceError> {
        for (idx, m) in self.mats.iter().enumerate() {
            for i in 0..self.seq_len {
                let row = m.row(i);
                let sum: f32 = row[..=i].iter().sum();
                if (sum - 1.0).abs() > 1e-3 {
                    return Err(TraceError::ShapeMismatch(format!(
                        "matrix {idx} row {i} sums to {sum}"
                    )));
                }
                if row[i + 1..].iter().any(|&v| v != 0.0) {
                    return Err(TraceError::ShapeMismatch(format!(
                        "matrix {idx} row {i} has non-zero cells above the diagonal"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn save_trace(trace: &AttentionTrace, path: &Path) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(trace.layers as u32).to_le_bytes())?;
    w.write_all(&(trace.heads as u32).to_le_bytes())?;
    w.write_all(&(trace.seq_len as u32).to_le_bytes())?;
    for m in &trace.mats {
        for &v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<AttentionTrace, TraceError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_fully(&mut r, &mut magic, 0)?;
    if magic != TRACE_MAGIC {
        return Err(TraceError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let layers = read_u32(&mut r)? as usize;
    let heads = read_u32(&mut r)? as usize;
    let seq_len = read_u32(&mut r)? as usize;

    let floats = layers
        .checked_mul(heads)
        .and_then(|n| n.checked_mul(seq_len))
        .and_then(|n| n.checked_mul(seq_len))
        .ok_or(TraceError::DimensionOverflow)?;
    let expected_bytes = floats.checked_mul(4).ok_or(TraceError::DimensionOverflow)? as u64;
    // Reject absurd declarations before attempting a huge allocation.
    if expected_bytes > 1 << 33 {
        return Err(TraceError::DimensionOverflow);
    }

    let mut payload = vec![0u8; expected_bytes as usize];
    read_fully(&mut r, &mut payload, expected_bytes)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TraceError::ShapeMismatch(
            "trailing bytes after payload".into(),
        ));
    }

    let per_mat = seq_len * seq_len;
    let mut mats = Vec::with_capacity(layers * heads);
    for m in 0..layers * heads {
        let mut data = Vec::with_capacity(per_mat);
        for i in 0..per_mat {
            let off = (m * per_mat + i) * 4;
            data.push(f32::from_le_bytes(
                payload[off..off + 4].try_into().unwrap(),
            ));
        }
        mats.push(Matrix::new(seq_len, seq_len, data));
    }
    AttentionTrace::new(layers, heads, seq_len, mats)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TraceError> {
    let mut buf = [0u8; 4];
    read_fully(r, &mut buf, 0)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8], expected: u64) -> Result<(), TraceError> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => {
                let expected = if expected > 0 {
                    expected
                } else {
                    buf.len() as u64
                };
                return Err(TraceError::Truncated {
                    expected,
                    found: filled as u64,
                });
            }
            n => filled += n,
        }
    }
    Ok(())
}
