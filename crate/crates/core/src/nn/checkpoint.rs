//! Weight files: magic, architecture hash, then every tensor as
//! `u32 rows, u32 cols, f64 row-major`, all little-endian.

use super::{Matrix, ParamSet};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"PCDCWGT1";

pub fn write_weights<W: Write>(mut w: W, params: &ParamSet, config_hash: u64) -> Result<()> {
    w.write_all(&to_bytes(params, config_hash))?;
    Ok(())
}

pub fn to_bytes(params: &ParamSet, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + params.scalar_count() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for m in params.values() {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Digest of the serialized weights, stored in stream headers.
pub fn weights_hash(params: &ParamSet) -> u64 {
    let digest = Sha256::digest(to_bytes(params, 0));
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

/// Load tensors into `template`, which fixes the expected layout.
pub fn read_weights<R: Read>(mut r: R, template: &ParamSet, config_hash: u64) -> Result<ParamSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf, template, config_hash)
}

pub fn from_bytes(buf: &[u8], template: &ParamSet, config_hash: u64) -> Result<ParamSet> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if buf.len() < pos + n {
            return Err(Error::decode(buf.len(), "weights file truncated"));
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };
    if take(8)? != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHTS_MAGIC,
        });
    }
    let found = u64::from_le_bytes(take(8)?.try_into().unwrap());
    if found != config_hash {
        return Err(Error::HashMismatch {
            what: "model architecture".into(),
            stream: config_hash,
            loaded: found,
        });
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if count != template.len() {
        return Err(Error::ShapeMismatch(format!(
            "weights file has {count} tensors, model needs {}",
            template.len()
        )));
    }
    let mut out = template.clone();
    for id in template.ids() {
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if (rows, cols) != template.get(id).shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} is {rows}x{cols}, expected {:?}",
                template.name(id),
                template.get(id).shape()
            )));
        }
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.set(id, Matrix::from_vec(rows, cols, data));
    }
    if pos != buf.len() {
        return Err(Error::decode(pos, "trailing bytes after weights"));
    }
    Ok(out)
}
