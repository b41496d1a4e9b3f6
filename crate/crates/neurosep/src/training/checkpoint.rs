//! Checkpoint file format: versioned header + named f64 tensor blobs.
//!
//! Layout (all little-endian):
//!   magic "NSCK", version u32,
//!   meta_len u64, meta (JSON: stage echo, step, seed, schedule state),
//!   tensor count u64, then per tensor:
//!     name_len u16, name bytes, rows u64, cols u64, rows*cols f64 values.
//!
//! Tensors cover every model parameter plus the optimizer moments
//! (`adam.m.*` / `adam.v.*`). Nothing in the file depends on wall-clock
//! time, so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

const MAGIC: &[u8; 4] = b"NSCK";
const VERSION: u32 = 1;

/// Named tensors; the in-memory form of a checkpoint's payload.
pub type Snapshot = Vec<(String, Array2<f64>)>;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// JSON echo of the stage configuration that produced this checkpoint.
    pub stage_config: String,
    /// Global optimizer step count.
    pub step: u64,
    /// Root seed; together with the step counters this pins every RNG
    /// stream (all randomness is counter-based).
    pub seed: u64,
    /// Best validation loss at save time.
    pub best_val_loss: f64,
    /// Plateau halvings applied so far.
    pub halvings: u32,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Snapshot,
}

/// Copies all parameters out of the store.
pub fn snapshot(store: &ParamStore) -> Snapshot {
    let mut out: Snapshot = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id).clone()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Loads tensors into the store by name. When `module_prefix` is given, only
/// names under that prefix are applied. Returns the number of tensors
/// written; unknown names are ignored (checkpoints may carry more modules
/// than the current graph), but a shape clash is an error.
pub fn restore(
    store: &mut ParamStore,
    snap: &Snapshot,
    module_prefix: Option<&str>,
) -> Result<usize> {
    let mut applied = 0;
    for (name, value) in snap {
        if name.starts_with("adam.") {
            continue;
        }
        if let Some(prefix) = module_prefix {
            if !(name.starts_with(prefix) && name[prefix.len()..].starts_with('.')) {
                continue;
            }
        }
        if let Some(id) = store.find(name) {
            if store.value(id).dim() != value.dim() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    value.dim(),
                    store.value(id).dim()
                )));
            }
            store.value_mut(id).assign(value);
            applied += 1;
        }
    }
    Ok(applied)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for (name, tensor) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.nrows() as u64).to_le_bytes())?;
        w.write_all(&(tensor.ncols() as u64).to_le_bytes())?;
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 8];
    r.read_exact(&mut head)
        .map_err(|e| Error::Data(format!("{}: truncated checkpoint: {e}", path.display())))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let meta_len = u64::from_le_bytes(len8) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Data(format!("{}: bad checkpoint meta: {e}", path.display())))?;

    r.read_exact(&mut len8)?;
    let count = u64::from_le_bytes(len8) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("non-utf8 tensor name".into()))?;
        r.read_exact(&mut len8)?;
        let rows = u64::from_le_bytes(len8) as usize;
        r.read_exact(&mut len8)?;
        let cols = u64::from_le_bytes(len8) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        r.read_exact(&mut data)
            .map_err(|e| Error::Data(format!("truncated tensor {name}: {e}")))?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::Data(format!("bad tensor shape: {e}")))?,
        ));
    }
    Ok(Checkpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::xavier;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(names: &[&str], seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in names {
            store.add(*n, xavier(&mut rng, 3, 2));
        }
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = store_with(&["ee.w", "se.w", "aad.w"], 5);
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                stage_config: "{\"stage\":\"se\"}".into(),
                step: 42,
                seed: 7,
                best_val_loss: -3.25,
                halvings: 2,
            },
            tensors: snapshot(&store),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta.step, 42);
        assert_eq!(back.meta.halvings, 2);
        assert_eq!(back.tensors.len(), 3);
        for ((n0, t0), (n1, t1)) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0, t1);
        }

        // identical save is byte-identical
        let path2 = dir.path().join("b.ckpt");
        save_checkpoint(&path2, &ckpt).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn restore_filters_by_module() {
        let src = store_with(&["ee.w", "se.w"], 5);
        let snap = snapshot(&src);
        let mut dst = store_with(&["ee.w", "se.w"], 99);
        let before_se = dst.value(dst.find("se.w").unwrap()).clone();
        // different RNG state means values differ
        assert_ne!(&before_se, src.value(src.find("se.w").unwrap()));

        let n = restore(&mut dst, &snap, Some("ee")).unwrap();
        assert_eq!(n, 1);
        assert_eq!(
            dst.value(dst.find("ee.w").unwrap()),
            src.value(src.find("ee.w").unwrap())
        );
        assert_eq!(dst.value(dst.find("se.w").unwrap()), &before_se);
    }

    #[test]
    fn restore_rejects_shape_clash() {
        let src = store_with(&["ee.w"], 5);
        let snap = snapshot(&src);
        let mut dst = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        dst.add("ee.w", xavier(&mut rng, 4, 4));
        assert!(restore(&mut dst, &snap, None).is_err());
    }
}
