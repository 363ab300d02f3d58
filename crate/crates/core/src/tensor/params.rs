use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A learnable matrix and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

/// Named learnable matrices. Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidParameter(format!("duplicate parameter `{name}`")));
        }
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, DenseMatrix::zeros(rows, cols))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name).map(|p| &p.grad)
    }

    pub fn set_value(&mut self, name: &str, value: DenseMatrix) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Moves every parameter of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::InvalidParameter(format!("duplicate parameter `{name}`")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// Writes parameter values in the binary checkpoint layout:
    ///
    /// ```text
    /// magic  b"UGCLPRM1"
    /// u32    parameter count
    /// repeated, in name order:
    ///   u32  name length, then UTF-8 name bytes
    ///   u64  rows, u64 cols
    ///   f64  rows*cols values, row-major
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::InvalidParameter(format!("{}: {what}", path.display()));
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| corrupt("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let count = cur.u32().ok_or_else(|| corrupt("truncated count"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u32().ok_or_else(|| corrupt("truncated name"))? as usize;
            let name = std::str::from_utf8(cur.take(len).ok_or_else(|| corrupt("truncated name"))?)
                .map_err(|_| corrupt("name is not utf-8"))?
                .to_string();
            let rows = cur.u64().ok_or_else(|| corrupt("truncated shape"))? as usize;
            let cols = cur.u64().ok_or_else(|| corrupt("truncated shape"))? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let raw = cur.take(8).ok_or_else(|| corrupt("truncated values"))?;
                data.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            store.insert(name, DenseMatrix::new(rows, cols, data)?)?;
        }
        if cur.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(store)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UGCLPRM1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn glorot_bounds_and_zero_grads() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, Stream::ReconInit);
        store.insert_glorot("w", 10, 6, &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        let p = store.get("w").unwrap();
        assert!(p.value.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.grad, DenseMatrix::zeros(10, 6));
        assert!(store.insert_zeros("w", 1, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut store = ParamStore::new();
        store
            .insert("a.w", DenseMatrix::from_rows(&[[1.5, -2.0], [0.1, 1e-300]]))
            .unwrap();
        store.insert_zeros("b", 0, 3).unwrap();
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded, store);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ParamStore::load(&path).is_err());
    }
}
