//! SRPK1 binary checkpoints: a named tensor table with bit-exact f64
//! payloads, little-endian throughout.
//!
//! Layout: magic `SRPK1`, format version `u16`, entry count `u32`, then
//! per entry: name length `u32` + UTF-8 name, rank `u32`, dims `u32` each,
//! and the data as `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flowalign::tensor::Tensor;
use flowalign::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SRPK1";
pub const VERSION: u16 = 1;

fn io_err(context: &str, e: std::io::Error) -> Error {
    Error::Config(format!("checkpoint {context}: {e}"))
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
        let shape = tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for dim in &shape {
            out.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        for v in tensor.to_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    file.write_all(&out).map_err(|e| io_err("write", e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err("open", e))?
        .read_to_end(&mut buf)
        .map_err(|e| io_err("read", e))?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Config("checkpoint truncated".into()));
        }
        let slice = &buf[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };

    if take(&mut pos, 5)? != MAGIC {
        return Err(Error::Config("checkpoint has wrong magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Config("checkpoint name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        table.insert(name, Tensor::new(shape, data)?);
    }
    if pos != buf.len() {
        return Err(Error::Config("checkpoint has trailing bytes".into()));
    }
    Ok(table)
}
