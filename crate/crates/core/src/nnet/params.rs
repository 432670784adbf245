//! Named parameter tensors and the binary checkpoint container.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic      8 bytes  "SPXCKPT\0"
//! version    u32
//! config     u64 length + JSON bytes (ModelConfig)
//! seed       u64
//! metadata   u64 length + JSON bytes
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name, u64 rows, u64 cols, rows·cols f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

pub type Grads = ParamStore;

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Zero tensors shaped like `self`.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    /// Adds `other` tensor-wise; tensors absent from `self` are inserted.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (name, m) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(existing) => existing.add_assign(m),
                None => {
                    self.tensors.insert(name.clone(), m.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for m in self.tensors.values_mut() {
            m.scale(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales so that the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// SHA-256 over names, shapes and raw value bits, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in &self.tensors {
            hasher.update((name.len() as u32).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<C, M> {
    pub config: C,
    pub seed: u64,
    pub metadata: M,
    pub params: ParamStore,
}

impl<C: Serialize + DeserializeOwned, M: Serialize + DeserializeOwned> Checkpoint<C, M> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_blob(&mut out, &serde_json::to_vec(&self.config)?);
        out.extend_from_slice(&self.seed.to_le_bytes());
        write_blob(&mut out, &serde_json::to_vec(&self.metadata)?);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let config = serde_json::from_slice(&read_blob(&mut r)?)?;
        let seed = read_u64(&mut r)?;
        let metadata = serde_json::from_slice(&read_blob(&mut r)?)?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&n| n.saturating_mul(8) <= r.len())
                .ok_or_else(|| Error::data(format!("checkpoint tensor `{name}` is truncated")))?;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            params.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if !r.is_empty() {
            return Err(Error::data("trailing bytes after checkpoint tensors"));
        }
        Ok(Checkpoint {
            config,
            seed,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating checkpoint {}", path.display()), e))?;
        file.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::data("checkpoint is truncated"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_blob(r: &mut &[u8]) -> Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    if len > r.len() {
        return Err(Error::data("checkpoint is truncated"));
    }
    let mut blob = vec![0u8; len];
    read_exact(r, &mut blob)?;
    Ok(blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            seed in any::<u64>(),
        ) {
            let mut params = ParamStore::new();
            let n = values.len();
            params.insert("a.w", Matrix::from_vec(1, n, values.clone()));
            params.insert("b", Matrix::from_vec(n, 1, values.iter().rev().copied().collect()));
            let ck = Checkpoint { config: "cfg".to_string(), seed, metadata: vec![1u32, 2], params };
            let bytes = ck.to_bytes().unwrap();
            let back: Checkpoint<String, Vec<u32>> = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.seed, seed);
            prop_assert_eq!(back.params.digest(), ck.params.digest());
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Matrix::filled(2, 2, 1.5));
        let ck = Checkpoint { config: 1u8, seed: 7, metadata: (), params };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<u8, ()>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<u8, ()>::from_bytes(&bad).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = ParamStore::new();
        g.insert("w", Matrix::filled(1, 4, 3.0));
        assert_eq!(g.clip_global_norm(1.0), 6.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
