//! Binary parameter container.
//!
//! Layout (little endian): magic `CIRRUSP1`, entry count `u32`, then per entry
//! name length `u32`, UTF-8 name, trainable flag `u8`, rank `u32`, dims `u64`
//! each, and the values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::ParamStore;
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"CIRRUSP1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save_params<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.iter() {
            w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_params<F: Real>(path: &Path) -> Result<ParamStore<F>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut flag = [0; 1];
        r.read_exact(&mut flag)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0; n * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if store.get(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate entry {name}")));
        }
        store.insert(name, value, flag[0] != 0);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.insert("a.weight", ndarray::arr2(&[[1.5f32, -2.0], [0.25, 3.0]]).into_dyn(), true);
        store.insert("a.running_mean", ndarray::arr1(&[0.5f32]).into_dyn(), false);
        let p = dir.path().join("p.bin");
        save_params(&p, &store).unwrap();
        assert_eq!(load_params::<f32>(&p).unwrap(), store);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(load_params::<f32>(&p), Err(CheckpointError::BadMagic)));
    }
}
