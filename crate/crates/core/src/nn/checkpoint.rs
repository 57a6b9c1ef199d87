//! Checkpoint directory: `weights.bin` plus `manifest.txt`.
//!
//! `weights.bin` is `MRCK` magic, a `u32` parameter count, then per
//! parameter: `u32` name length, UTF-8 name, `u32` rank, `u64` extents,
//! and the values as little-endian `f64`. The manifest lists
//! `name<TAB>shape` lines in canonical (registration) order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::params::ParamStore;

pub const CHECKPOINT_WEIGHTS: &str = "weights.bin";
pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
const MAGIC: &[u8; 4] = b"MRCK";

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, params: &ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut bin = Vec::new();
    let mut manifest = String::new();
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id);
        let value = params.value(id);
        bin.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bin.extend_from_slice(name.as_bytes());
        bin.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &e in value.shape() {
            bin.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in value.data() {
            bin.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        manifest.push_str(&format!("{name}\t{}\n", shape_text(value.shape())));
    }
    fs::write(dir.join(CHECKPOINT_WEIGHTS), bin)?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated weights file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads every parameter of `params` by name. The checkpoint must hold
/// exactly the same names and shapes.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>, params: &mut ParamStore<T>) -> Result<()> {
    let path = dir.as_ref().join(CHECKPOINT_WEIGHTS);
    let bytes = fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic in weights file".into()));
    }
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {count} parameters, model has {}", params.len())));
    }
    let mut loaded = vec![false; count];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let id = params.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if params.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {} vs model {}",
                shape_text(&shape),
                shape_text(params.value(id).shape())
            )));
        }
        let n: usize = shape.iter().product();
        let data = r.take(8 * n)?.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        params.set(id, Tensor::new(shape, data)?)?;
        loaded[id.0] = true;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in weights file".into()));
    }
    if loaded.iter().any(|l| !l) {
        return Err(Error::Checkpoint("duplicate parameter in checkpoint".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::<f64>::new();
        a.add("enc/w", Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.1 - 0.3)).unwrap();
        a.add("head/b", Tensor::from_fn(vec![4], |i| -(i as f64))).unwrap();
        save_checkpoint(dir.path(), &a).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.add("enc/w", Tensor::zeros(vec![2, 3])).unwrap();
        b.add("head/b", Tensor::zeros(vec![4])).unwrap();
        load_checkpoint(dir.path(), &mut b).unwrap();
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
        }
        let manifest = fs::read_to_string(dir.path().join(CHECKPOINT_MANIFEST)).unwrap();
        assert_eq!(manifest, "enc/w\t2x3\nhead/b\t4\n");
        let mut c = ParamStore::<f64>::new();
        c.add("enc/w", Tensor::zeros(vec![3, 2])).unwrap();
        c.add("head/b", Tensor::zeros(vec![4])).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &mut c), Err(Error::Checkpoint(_))));
    }
}
