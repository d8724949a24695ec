//! Weight checkpoint format.
//!
//! Layout, all little-endian:
//!   magic "RBSRW1"
//!   u32 tensor count
//!   per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//!               raw f32 data.
//!
//! Tensors are written rank 4 (N, C, H, W). Files are written to a temp
//! sibling and renamed so a crash never leaves a half checkpoint.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{RbsrError, Result};
use crate::nn::adam::Parameter;
use crate::nn::tensor::{Scalar, Tensor4};

const MAGIC: &[u8; 6] = b"RBSRW1";

pub fn encode_checkpoint<T: Scalar>(params: &[Parameter<T>]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(RbsrError::Checkpoint(format!(
                "duplicate tensor name '{}'",
                p.name
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(RbsrError::Checkpoint("tensor name too long".into()));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(4u8);
        for d in [p.value.n, p.value.c, p.value.h, p.value.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.value.data {
            out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor4<f32>)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(RbsrError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 6)?;
    if magic != MAGIC {
        return Err(RbsrError::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| RbsrError::Checkpoint("tensor name not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(RbsrError::Checkpoint(format!("duplicate tensor name '{name}'")));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        if rank == 0 || rank > 4 {
            return Err(RbsrError::Checkpoint(format!("unsupported rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            dims[4 - rank + i] = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let numel: usize = dims.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor4::new(dims[0], dims[1], dims[2], dims[3], data)));
    }
    if pos != bytes.len() {
        return Err(RbsrError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(tensors)
}

pub fn checkpoint_write<T: Scalar>(params: &[Parameter<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| RbsrError::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| RbsrError::io(path.display().to_string(), e))
}

pub fn checkpoint_read(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor4<f32>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| RbsrError::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}
