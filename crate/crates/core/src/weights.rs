//! Named parameter storage and the native weight archive format.
//!
//! Archive layout (all integers little-endian):
//! `b"SDSW"`, `u32` version, `u8` element width in bytes (4 or 8), `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` dims, raw values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::Scalar;

const MAGIC: &[u8; 4] = b"SDSW";
const VERSION: u32 = 1;

/// Parameter tensors keyed by dotted path, e.g. `plaque.dec2.conv1.weight`.
/// Gradients and optimizer moments reuse the same container.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Weights<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<ArrayViewD<'_, T>> {
        self.tensors
            .get(name)
            .map(|t| t.view())
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    pub fn get1(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        self.get(name)?
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("{name}: {e}")))
    }

    pub fn get2(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        self.get(name)?
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("{name}: {e}")))
    }

    pub fn get4(&self, name: &str) -> Result<ArrayView4<'_, T>> {
        self.get(name)?
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("{name}: {e}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Accumulate `other * scale` into matching tensors. Keys absent here are inserted.
    pub fn add_scaled(&mut self, other: &Weights<T>, scale: T) {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.tensors.insert(name.clone(), g.mapv(|v| v * scale));
                }
            }
        }
    }

    /// Add `grad` into the tensor named `name`, creating it if needed.
    pub fn accumulate(&mut self, name: &str, grad: ArrayViewD<'_, T>) {
        match self.tensors.get_mut(name) {
            Some(acc) => *acc += &grad,
            None => {
                self.tensors.insert(name.to_string(), grad.to_owned());
            }
        }
    }

    /// First tensor (in key order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .values()
            .flat_map(|t| t.iter())
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Convert element type (used to run gradient checks in `f64` on `f32` weights).
    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.mapv(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))),
                    )
                })
                .collect(),
        }
    }
}

/// Element types the archive can hold bit-exactly.
pub trait ArchiveScalar: Scalar {
    const WIDTH: u8;
    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl ArchiveScalar for f32 {
    const WIDTH: u8 = 4;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl ArchiveScalar for f64 {
    const WIDTH: u8 = 8;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl<T: ArchiveScalar> Weights<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.parameter_count() * T::WIDTH as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::WIDTH);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = cur.take(1)?[0];
        if width != T::WIDTH {
            return Err(Error::Checkpoint(format!(
                "archive holds {width}-byte values, expected {}",
                T::WIDTH
            )));
        }
        let count = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = cur.take(n * T::WIDTH as usize)?;
            let values: Vec<T> = raw.chunks_exact(T::WIDTH as usize).map(T::read_le).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Independent RNG stream for `(seed, tag)`. Streams for different tags are
/// unrelated, so adding a tensor or a worker never shifts another stream.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn sample() -> Weights<f32> {
        let mut w = Weights::new();
        w.insert("a.weight", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, -0.0, 7.0]).unwrap());
        w.insert("a.bias", ArrayD::from_elem(IxDyn(&[2]), 0.125));
        w
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let w = sample();
        let back = Weights::<f32>::from_bytes(&w.to_bytes()).unwrap();
        let bits = |w: &Weights<f32>| -> Vec<u32> {
            w.iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&w), bits(&back));
        assert_eq!(w, back);
    }

    #[test]
    fn archive_rejects_width_mismatch_and_truncation() {
        let bytes = sample().to_bytes();
        assert!(Weights::<f64>::from_bytes(&bytes).is_err());
        assert!(Weights::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Weights::<f32>::from_bytes(b"nope").is_err());
    }

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        use rand::Rng;
        let a: u64 = derive_rng(1, "x").random();
        let b: u64 = derive_rng(1, "x").random();
        let c: u64 = derive_rng(1, "y").random();
        let d: u64 = derive_rng(2, "x").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn add_scaled_accumulates() {
        let mut acc = sample().zeros_like();
        acc.add_scaled(&sample(), 2.0);
        assert_eq!(acc.get1("a.bias").unwrap()[0], 0.25);
    }
}
