//! Versioned binary checkpoint: magic string, format version, a UTF-8
//! metadata blob (JSON in practice), then (name, shape, little-endian f64
//! values) per parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::NumericsError;

const MAGIC: &[u8; 8] = b"SCRIMPCK";
const VERSION: u32 = 1;

pub fn save(path: &Path, store: &ParamStore, meta: &str) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    let count = store.names().count() as u64;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, returning the parameters and the metadata blob.
pub fn load(path: &Path) -> Result<(ParamStore, String), NumericsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::BadCheckpoint {
            reason: "bad magic".into(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::BadCheckpoint {
            reason: format!("unsupported format version {version}"),
        });
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes).map_err(|_| NumericsError::BadCheckpoint {
        reason: "metadata is not UTF-8".into(),
    })?;
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| NumericsError::BadCheckpoint {
            reason: "parameter name is not UTF-8".into(),
        })?;
        let ndims = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(&name, Tensor::new(shape, data));
    }
    Ok((store, meta))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
