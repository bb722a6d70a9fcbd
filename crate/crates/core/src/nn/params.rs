//! Named parameter registry and the checkpoint file format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes   "RTCKPT01"
//! count      u32       number of arrays
//! repeated count times, in ascending name order:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rank     u32       1..=3
//!   dims     rank × u64
//!   data     product(dims) × f64
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RTCKPT01";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    groups: BTreeMap<String, String>,
    frozen_groups: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter under `group`. Names must be unique.
    pub fn insert(&mut self, name: &str, group: &str, value: Tensor) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter `{name}`")));
        }
        self.values.insert(name.to_string(), value);
        self.groups.insert(name.to_string(), group.to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn group_of(&self, name: &str) -> Option<&str> {
        self.groups.get(name).map(String::as_str)
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen_groups.insert(group.to_string());
    }

    pub fn unfreeze_group(&mut self, group: &str) {
        self.frozen_groups.remove(group);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.groups
            .get(name)
            .is_some_and(|g| self.frozen_groups.contains(g))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in &self.values {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Read a checkpoint into a name → array map.
    pub fn read_arrays(path: &Path) -> Result<BTreeMap<String, Tensor>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, 0, "bad checkpoint magic"));
        }
        let count = r.u32()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, r.pos, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(&dims, data).map_err(|e| Error::format(path, r.pos, e.to_string()))?;
            out.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos, "trailing bytes after last array"));
        }
        Ok(out)
    }

    /// Overwrite registered parameters from a checkpoint. Every registered
    /// name must be present with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let arrays = Self::read_arrays(path)?;
        for (name, slot) in self.values.iter_mut() {
            let t = arrays
                .get(name)
                .ok_or_else(|| Error::format(path, 0, format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    path,
                    0,
                    format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, self.pos, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: BTreeMap<String, Vec<f64>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add the gradients of every parameter loaded on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (name, v) in tape.params() {
            if let Some(g) = grads.raw(v) {
                let slot = self
                    .grads
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }

    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        self.grads.insert(name.to_string(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut ps = ParamStore::new();
        ps.insert("b", "g", Tensor::new(&[3], vec![1.0, -2.5, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        ps.insert("a.w", "g", Tensor::new(&[2, 2, 1], vec![0.1, 0.2, 0.3, 1e300]).unwrap())
            .unwrap();
        ps.save(&path).unwrap();
        let mut other = ps.clone();
        other.get_mut("b").unwrap().data_mut()[0] = 9.0;
        other.load(&path).unwrap();
        assert_eq!(other, ps);
        // little-endian layout: magic, count=2, first name is "a.w"
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"RTCKPT01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.w");
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut ps = ParamStore::new();
        ps.insert("w", "g", Tensor::zeros(&[4, 4])).unwrap();
        ps.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamStore::read_arrays(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.insert("w", "g", Tensor::zeros(&[1])).unwrap();
        assert!(ps.insert("w", "h", Tensor::zeros(&[1])).is_err());
    }
}
