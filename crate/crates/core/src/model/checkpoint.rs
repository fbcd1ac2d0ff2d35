//! Head checkpoint format (little-endian):
//!
//! ```text
//! "NFP1" | version: u32 | d: u32 | p: u32 | h_r: u32 | k: u32 | lambda: f64
//! 8 × (rows: u32 | cols: u32 | rows·cols × f64, row-major)
//! ```
//!
//! Tensors follow [`super::TENSOR_NAMES`]. A pair-feature head is written
//! with `p = 0`; its interaction dimension is read back from the agreement
//! weights. The seed is not stored.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{HeadConfig, HeadParams, Interaction, Matrix};
use crate::embed::ByteReader;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NFP1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(cfg: &HeadConfig, params: &HeadParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + params.num_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for x in [cfg.d, cfg.projection_rows(), cfg.h_r, cfg.k] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.lambda.to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for x in t.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, cfg: &HeadConfig, params: &HeadParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&checkpoint_bytes(cfg, params))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(HeadConfig, HeadParams)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(HeadConfig, HeadParams)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let d = r.u32()? as usize;
    let p = r.u32()? as usize;
    let h_r = r.u32()? as usize;
    let k = r.u32()? as usize;
    let lambda = r.f64()?;

    let mut tensors = Vec::with_capacity(8);
    for _ in 0..8 {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::Format("truncated file: tensor larger than checkpoint".into()))?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Matrix::from_vec(rows, cols, data));
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("eight tensors read");
    let params = HeadParams {
        w_proj: next(),
        b_proj: next(),
        w_agree: next(),
        b_agree: next(),
        w_attn1: next(),
        w_attn2: next(),
        w_cls: next(),
        b_cls: next(),
    };
    let interaction = if p == 0 {
        Interaction::Pair {
            dim: params.w_agree.cols(),
        }
    } else {
        Interaction::BiEncoder
    };
    let cfg = HeadConfig {
        d,
        p,
        h_r,
        k,
        lambda,
        seed: 0,
        interaction,
    };
    cfg.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    params.check_shapes(&cfg)?;
    Ok((cfg, params))
}
