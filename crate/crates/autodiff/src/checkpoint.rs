//! Binary checkpoint container: named tensors plus an opaque metadata string.
//!
//! Tensors are stored as little-endian f32 (down-cast from the f64 compute
//! representation) to keep files within the model size budgets; loading
//! widens back to f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::AutodiffError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GVCK";
const VERSION: u32 = 1;

/// Serialize `(name, tensor)` pairs with a metadata blob (typically JSON).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    meta: &str,
    tensors: &[(String, &Tensor)],
) -> Result<(), AutodiffError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(AutodiffError::InvalidArgument(format!(
                "tensor name too long: {} bytes",
                name_bytes.len()
            )));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(AutodiffError::InvalidArgument(format!("rank {} too large", shape.len())));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint: `(meta, tensors)` in stored order.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(String, Vec<(String, Tensor)>), AutodiffError> {
    let mut r = BufReader::new(File::open(path.as_ref())?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Format(format!("bad magic {magic:02x?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutodiffError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| AutodiffError::Format("metadata is not utf-8".into()))?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| AutodiffError::Format("tensor name is not utf-8".into()))?;

        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(|e| {
            AutodiffError::Format(format!("tensor `{name}` payload truncated: {e}"))
        })?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    Ok((meta, tensors))
}

fn read_u32(r: &mut impl Read) -> Result<u32, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
