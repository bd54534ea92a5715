//! Named-blob checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CMADACK1"
//! u32 header length, UTF-8 header of `key=value` lines
//!     (phase, step, seed, config_hash, blobs)
//! per blob: u32 name length, name, u8 dtype length, dtype, 4 × u64 dims, u64 byte length, bytes
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"CMADACK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Translation,
    Supervised,
    Adaptation,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Translation => "translation",
            Phase::Supervised => "supervised",
            Phase::Adaptation => "adaptation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "translation" => Phase::Translation,
            "supervised" => Phase::Supervised,
            "adaptation" => Phase::Adaptation,
            other => bail!(Checkpoint, "unknown phase {other:?}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dtype: String,
    pub shape: Shape,
    pub bytes: Vec<u8>,
}

impl Blob {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Blob {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape(),
            bytes,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            bail!(
                Checkpoint,
                "blob {} stores {}, requested {}",
                self.name,
                self.dtype,
                T::DTYPE
            );
        }
        if self.bytes.len() != self.shape.numel() * T::BYTES {
            bail!(Checkpoint, "blob {} is truncated", self.name);
        }
        let data = self.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(self.shape, data)
    }

    /// Raw `u64` payload (used for integer optimizer state).
    pub fn from_u64s(name: &str, values: &[u64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Blob {
            name: name.to_string(),
            dtype: "u64".to_string(),
            shape: Shape::new(1, 1, 1, values.len()),
            bytes,
        }
    }

    pub fn to_u64s(&self) -> Result<Vec<u64>> {
        if self.dtype != "u64" || !self.bytes.len().is_multiple_of(8) {
            bail!(Checkpoint, "blob {} is not a u64 array", self.name);
        }
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn new(phase: Phase, step: u64, seed: u64, config_hash: &str) -> Self {
        Checkpoint {
            phase,
            step,
            seed,
            config_hash: config_hash.to_string(),
            blobs: Vec::new(),
        }
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    /// Refuses a checkpoint produced under a different configuration unless `allow_mismatch`.
    pub fn verify_config(&self, expected_hash: &str, allow_mismatch: bool) -> Result<()> {
        if self.config_hash != expected_hash && !allow_mismatch {
            bail!(
                Checkpoint,
                "config hash mismatch: checkpoint has {}, current config is {}",
                self.config_hash,
                expected_hash
            );
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = alloc::format!(
            "phase={}\nstep={}\nseed={}\nconfig_hash={}\nblobs={}\n",
            self.phase.as_str(),
            self.step,
            self.seed,
            self.config_hash,
            self.blobs.len()
        );
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.dtype.len() as u8);
            out.extend_from_slice(b.dtype.as_bytes());
            for d in b.shape.0 {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(b.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&b.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            bail!(Checkpoint, "not a checkpoint file (bad magic)");
        }
        let header_len = r.u32()? as usize;
        let header = core::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut phase = None;
        let mut step = None;
        let mut seed = None;
        let mut hash = None;
        let mut count = None;
        for line in header.lines() {
            let Some((k, v)) = line.split_once('=') else {
                bail!(Checkpoint, "malformed header line {line:?}");
            };
            match k {
                "phase" => phase = Some(Phase::parse(v)?),
                "step" => step = Some(parse_u64(v)?),
                "seed" => seed = Some(parse_u64(v)?),
                "config_hash" => hash = Some(v.to_string()),
                "blobs" => count = Some(parse_u64(v)? as usize),
                _ => {}
            }
        }
        let (Some(phase), Some(step), Some(seed), Some(config_hash), Some(count)) =
            (phase, step, seed, hash, count)
        else {
            bail!(Checkpoint, "incomplete header");
        };
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let dtype_len = r.take(1)?[0] as usize;
            let dtype = r.string(dtype_len)?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u64()? as usize;
            }
            let len = r.u64()? as usize;
            let data = r.take(len)?.to_vec();
            blobs.push(Blob {
                name,
                dtype,
                shape: Shape(dims),
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            bail!(Checkpoint, "{} trailing bytes", bytes.len() - r.pos);
        }
        Ok(Checkpoint {
            phase,
            step,
            seed,
            config_hash,
            blobs,
        })
    }
}

fn parse_u64(v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Checkpoint(alloc::format!("invalid integer {v:?}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Checkpoint, "truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        core::str::from_utf8(self.take(n)?)
            .map(|s| s.to_string())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let mut ck = Checkpoint::new(Phase::Adaptation, 42, 7, "abc123");
        let t = Tensor::from_vec(
            Shape::new(1, 2, 1, 2),
            alloc::vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25],
        )
        .unwrap();
        ck.blobs.push(Blob::from_tensor("net/w", &t));
        ck.blobs.push(Blob::from_u64s("adam/step", &[9]));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let t2 = back.blob("net/w").unwrap().to_tensor::<f32>().unwrap();
        let bits: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(
            bits,
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(back.blob("net/w").unwrap().to_tensor::<f64>().is_err());
    }

    #[test]
    fn hash_mismatch_refused_unless_overridden() {
        let ck = Checkpoint::new(Phase::Supervised, 0, 0, "aaa");
        assert!(ck.verify_config("bbb", false).is_err());
        assert!(ck.verify_config("bbb", true).is_ok());
        assert!(ck.verify_config("aaa", false).is_ok());
    }

    #[test]
    fn truncated_input_rejected() {
        let ck = Checkpoint::new(Phase::Translation, 1, 2, "h");
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }
}
