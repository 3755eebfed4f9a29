//! Flat binary checkpoint format for named f64 parameter tensors.
//!
//! Layout: magic `TAPA`, u32 version, u32 parameter count, then per
//! parameter: u32 name length + UTF-8 name, u32 rank, u64 dims,
//! row-major f64 payload. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TapaError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TAPA";
const VERSION: u32 = 1;

pub fn save(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for dim in &shape {
            w.write_all(&(*dim as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TapaError::Parse("not a checkpoint file (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(TapaError::Parse(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TapaError::Parse("checkpoint parameter name is not UTF-8".into()))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Load a checkpoint into an existing parameter set by name; every
/// parameter must be present with a matching shape.
pub fn restore(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let loaded = load(path)?;
    for (name, tensor) in params {
        let entry = loaded
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| TapaError::Data(format!("checkpoint is missing parameter {}", name)))?;
        if entry.1 != tensor.shape() {
            return Err(TapaError::Dimension(format!(
                "checkpoint parameter {} has shape {:?}, model expects {:?}",
                name,
                entry.1,
                tensor.shape()
            )));
        }
        tensor.set_data(entry.2.clone());
    }
    Ok(())
}
