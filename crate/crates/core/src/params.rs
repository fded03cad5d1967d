//! Named parameter collections, initialization, and the `FSCKPT1` checkpoint
//! container.
//!
//! Layout: magic `FSCKPT1`, u32 entry count, then per entry a u32-length
//! UTF-8 name, u32 rank, u64 extents, and the f64 payload; a trailing u64
//! FNV-1a checksum covers every payload byte in file order. All integers
//! and floats are little-endian.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::io::{fnv1a64, write_atomic, Reader, Writer};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"FSCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the backend as a tracked value.
    pub fn bind<B: Backend>(&self, b: &mut B) -> Vec<B::V> {
        self.tensors.iter().map(|t| b.param(t)).collect()
    }

    /// Puts every parameter on the backend as a constant (no gradient).
    pub fn bind_frozen<B: Backend>(&self, b: &mut B) -> Vec<B::V> {
        self.tensors.iter().map(|t| b.constant(t.clone())).collect()
    }

    /// Appends all entries of `other`, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) -> usize {
        let offset = self.len();
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.add(format!("{prefix}{n}"), t);
        }
        offset
    }

    /// Order-sensitive digest of names, shapes, and values.
    pub fn digest(&self) -> u64 {
        let mut w = Writer::default();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            w.str(n);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        fnv1a64(&w.buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(self.len() as u32);
        let mut payload = Vec::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            w.str(n);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                let b = v.to_le_bytes();
                w.bytes(&b);
                payload.extend_from_slice(&b);
            }
        }
        w.u64(fnv1a64(&payload));
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut payload = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let bytes = r.take(count * 8)?;
            payload.extend_from_slice(bytes);
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, Tensor::new(&shape, data)?);
        }
        let stored = r.u64()?;
        if r.remaining() != 0 {
            return Err(Error::Data(
                "checkpoint: trailing bytes after checksum".into(),
            ));
        }
        if stored != fnv1a64(&payload) {
            return Err(Error::Data("checkpoint: payload checksum mismatch".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Replaces values from `loaded`, requiring identical names and shapes.
    pub fn assign_from(&mut self, loaded: &ParamStore) -> Result<()> {
        if loaded.names != self.names {
            return Err(Error::Data(format!(
                "checkpoint layout mismatch: {} entries vs {} expected",
                loaded.len(),
                self.len()
            )));
        }
        for (i, (mine, theirs)) in self.tensors.iter_mut().zip(&loaded.tensors).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Data(format!(
                    "checkpoint entry {}: shape {:?}, expected {:?}",
                    self.names[i],
                    theirs.shape(),
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("finite init")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("w", glorot(&mut rng, &[3, 4], 3, 4));
        s.add("b", Tensor::zeros(&[4]));
        s.add("k", glorot(&mut rng, &[3, 3, 2], 9, 9));
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = sample();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..7], b"FSCKPT1");
        assert_eq!(ParamStore::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn corrupted_payload_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0x40;
        assert!(ParamStore::from_bytes(&bytes).is_err());
        assert!(ParamStore::from_bytes(&bytes[..n - 3]).is_err());
        assert!(matches!(
            ParamStore::from_bytes(b"FSCKPT9...."),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn assign_checks_layout() {
        let mut a = sample();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3, 4]));
        assert!(a.assign_from(&b).is_err());
        let c = sample();
        a.assign_from(&c).unwrap();
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot(&mut rng, &[10, 20], 10, 20);
        let a = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }
}
