//! Parameter checkpoints: magic "MVP1", u32 LE tensor count, then per tensor
//! a u16 LE name length, the name bytes, a u8 rank, u32 LE dims, and the f32
//! LE data. Round-trips are bit-exact.

use super::{NetError, ParameterSet};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const PARAMS_MAGIC: &[u8; 4] = b"MVP1";

pub fn save_params(path: &Path, params: &ParameterSet) -> Result<(), NetError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_params(path: &Path) -> Result<ParameterSet, NetError> {
    let corrupt = |reason: &str| NetError::CorruptCheckpoint {
        file: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let buf = fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NetError> {
        if *pos + n > buf.len() {
            return Err(corrupt("truncated"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != PARAMS_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| corrupt("name not utf-8"))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    if pos != buf.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(ParameterSet::from_entries(entries))
}
