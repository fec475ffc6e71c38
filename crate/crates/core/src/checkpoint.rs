//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "NIRNCKPT"
//! version    u32      1
//! arch hash  8 bytes  first bytes of SHA-256 of the architecture description
//! dtype      u8 len + ASCII ("f32" or "f64")
//! iteration  u64
//! tensors    u32 count, then per tensor:
//!              u16 name len, name (UTF-8), u8 rank, rank × u64 dims, data
//! optimizers u32 count, then per optimizer:
//!              u16 name len, name, u64 step, f64 lr, f64 beta1, f64 beta2,
//!              f64 epsilon, u32 buffer count, then per buffer the first and
//!              second moment as unnamed tensors (u8 rank, dims, data)
//! ```

use std::fs;
use std::path::Path;

use nirnormal_tensor::{AdamState, Scalar, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NIRNCKPT";
pub const VERSION: u32 = 1;

pub fn arch_hash(description: &str) -> [u8; 8] {
    let digest = Sha256::digest(description.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub arch_hash: [u8; 8],
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub optimizers: Vec<(String, AdamState<T>)>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamState<T>> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_hash);
        out.push(T::DTYPE.len() as u8);
        out.extend_from_slice(T::DTYPE.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name);
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&(self.optimizers.len() as u32).to_le_bytes());
        for (name, s) in &self.optimizers {
            put_name(&mut out, name);
            out.extend_from_slice(&s.step_count.to_le_bytes());
            for v in [s.learning_rate, s.beta1, s.beta2, s.epsilon] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(s.first_moment.len() as u32).to_le_bytes());
            for (m, v) in s.first_moment.iter().zip(&s.second_moment) {
                put_tensor(&mut out, m);
                put_tensor(&mut out, v);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut arch_hash = [0u8; 8];
        arch_hash.copy_from_slice(r.take(8)?);
        let dlen = r.u8()? as usize;
        let dtype = r.take(dlen)?;
        if dtype != T::DTYPE.as_bytes() {
            return Err(format!(
                "checkpoint stores {}, expected {}",
                String::from_utf8_lossy(dtype),
                T::DTYPE
            ));
        }
        let iteration = r.u64()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.name()?;
            tensors.push((name, r.tensor::<T>()?));
        }
        let n = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n.min(16));
        for _ in 0..n {
            let name = r.name()?;
            let step_count = r.u64()?;
            let [learning_rate, beta1, beta2, epsilon] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            let k = r.u32()? as usize;
            let mut first_moment = Vec::with_capacity(k.min(1024));
            let mut second_moment = Vec::with_capacity(k.min(1024));
            for _ in 0..k {
                first_moment.push(r.tensor::<T>()?);
                second_moment.push(r.tensor::<T>()?);
            }
            optimizers.push((
                name,
                AdamState {
                    first_moment,
                    second_moment,
                    step_count,
                    beta1,
                    beta2,
                    epsilon,
                    learning_rate,
                },
            ));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            arch_hash,
            iteration,
            tensors,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and, when `expected_arch` is given, refuses one built
    /// for a different architecture.
    pub fn load(path: &Path, expected_arch: Option<[u8; 8]>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::decode(&bytes).map_err(|m| Error::format(path, m))?;
        if let Some(expected) = expected_arch {
            if ckpt.arch_hash != expected {
                return Err(Error::ArchMismatch {
                    expected: hex(&expected),
                    found: hex(&ckpt.arch_hash),
                });
            }
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> std::result::Result<String, String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn tensor<T: Scalar>(&mut self) -> std::result::Result<Tensor<T>, String> {
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("tensor extent overflows")?;
        let raw = self.take(len.checked_mul(T::BYTES).ok_or("tensor extent overflows")?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(&shape, data).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let p = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap();
        let mut s = AdamState::new(std::slice::from_ref(&p), 2e-4, 0.5, 0.999, 1e-8);
        s.step_count = 3;
        let ck = Checkpoint {
            arch_hash: arch_hash("x"),
            iteration: 42,
            tensors: vec![("g.conv1.weight".into(), p)],
            optimizers: vec![("g".into(), s)],
        };
        let bytes = ck.encode();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
