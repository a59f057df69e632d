//! Checkpoint binary format.
//!
//! Layout: magic "ATRL", version byte 1, tensor count as u32 LE, then per
//! tensor: name length (u16 LE), UTF-8 name, rank (u8), dims (u32 LE each),
//! values as f32 LE. Values round-trip through 32-bit precision.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ATRL";
const VERSION: u8 = 1;

pub fn save(params: &[(String, Tensor)], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        let shape = tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"ATRL\"")));
    }
    let mut version = [0u8; 1];
    file.read_exact(&mut version)
        .map_err(|_| Error::Checkpoint("file truncated before version".into()))?;
    if version[0] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version[0])));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut pos = 0;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > rest.len() {
            return Err(Error::Checkpoint(format!(
                "file truncated at byte {} (wanted {n} more)",
                *pos + 5 + 4
            )));
        }
        let s = &rest[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, shape, values));
    }
    if pos != rest.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len() - pos)));
    }
    Ok(tensors)
}

/// Restore a saved checkpoint into an existing parameter set; names and
/// shapes must match exactly.
pub fn load_into(params: &[(String, Tensor)], path: &Path) -> Result<()> {
    let saved = load(path)?;
    if saved.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            saved.len(),
            params.len()
        )));
    }
    for ((name, tensor), (saved_name, shape, values)) in params.iter().zip(saved) {
        if *name != saved_name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: `{saved_name}` vs model `{name}`"
            )));
        }
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape conflict for `{name}`: checkpoint {shape:?} vs model {:?}",
                tensor.shape()
            )));
        }
        tensor.set_data(values);
    }
    Ok(())
}
