//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"CCRECKPT"
//! version u32      currently 1
//! meta    u32 length + UTF-8 JSON (architecture + pipeline settings)
//! count   u32      number of tensors
//! tensor  u32 name length + UTF-8 name
//!         u32 rows, u32 cols
//!         rows*cols f64 values, little-endian
//! ```
//!
//! Tensors are written in parameter-store insertion order and restored
//! into the same order, so a loaded store is bit-identical to the saved
//! one.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CCRECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save_checkpoint(path: &Path, meta_json: &str, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rows as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols as u32).to_le_bytes())?;
        for v in &p.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore), CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta_json =
        String::from_utf8(meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.register(&name, Tensor::new(rows, cols, data));
    }
    Ok((meta_json, store))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::new(2, 3, vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]));
        store.register("b", Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, r#"{"d_enc":64}"#, &store).unwrap();
        let (meta, back) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, r#"{"d_enc":64}"#);
        assert_eq!(back.len(), 2);
        assert_eq!(back.get(0).name, "w");
        assert_eq!(back.get(0).value, store.get(0).value);
        assert_eq!(back.get(1).value, store.get(1).value);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt");
        std::fs::write(&path, b"garbage bytes").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
