//! Checkpoint container: JSON header (config snapshot + tensor manifest)
//! followed by raw little-endian `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CGCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Free-form config snapshot, model-specific.
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Write a checkpoint for one parameter store.
pub fn save(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let tensors: Vec<TensorMeta> = store
        .iter()
        .map(|(name, e)| TensorMeta {
            name: name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
        })
        .collect();
    let header = Header {
        version: VERSION,
        config: config.clone(),
        tensors,
    };
    let hbytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(hbytes.len() as u32).map_err(io_err)?;
    w.write_all(&hbytes).map_err(io_err)?;
    for (_, e) in store.iter() {
        for v in e.value.iter() {
            w.write_f32::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint; returns the config snapshot and the parameter store.
pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let hlen = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut store = ParamStore::new();
    for meta in &header.tensors {
        let len: usize = meta.shape.iter().product();
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io_err)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", meta.name)))?;
        store.insert_with(&meta.name, arr, meta.trainable);
    }
    Ok((header.config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1., 2., 3., 4., 5., 6.]).unwrap());
        store.insert_with("bn.running_mean", ArrayD::zeros(IxDyn(&[3])), false);
        let cfg = serde_json::json!({"kind": "test", "dim": 3});
        save(&path, &cfg, &store).unwrap();

        let (cfg2, store2) = load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store2.get("w"), store.get("w"));
        assert_eq!(store2.len(), 2);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());
    }
}
