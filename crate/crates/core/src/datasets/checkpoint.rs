//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"S3FK" | version u32 | count u32
//! count x { name_len u32 | name utf-8 | rank u32 | extents u64[rank] | dtype u8 | values }
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{numel, DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"S3FK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.push((name.into(), t));
    }

    /// Every tensor of `store` whose name starts with `prefix`.
    pub fn from_store(store: &ParamStore<f32>, prefix: &str) -> Self {
        let tensors = store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.to_string(), StoredTensor::F32(t.clone())))
            .collect();
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn f64(&self, name: &str) -> Option<&Tensor<f64>> {
        match self.get(name) {
            Some(StoredTensor::F64(t)) => Some(t),
            _ => None,
        }
    }

    /// All single-precision tensors, for loading into a parameter store.
    pub fn f32_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().filter_map(|(n, t)| match t {
            StoredTensor::F32(t) => Some((n.as_str(), t)),
            StoredTensor::F64(_) => None,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.dtype().tag());
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|&v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|&v| v.write_le(&mut out)),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 {
            return Err(bad(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic, not a checkpoint".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad(format!("{name}: extent overflow")))?);
            }
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| bad(format!("{name}: unknown dtype tag")))?;
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| bad(format!("{name}: size overflow")))?)?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(read_tensor(shape, raw)?),
                DType::F64 => StoredTensor::F64(read_tensor(shape, raw)?),
            };
            tensors.push((name, t));
        }
        if r.pos != payload.len() {
            return Err(bad(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }
}

fn read_tensor<T: Scalar>(shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size_of();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Write via a `.partial` sibling and rename into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    super::write_atomic(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = Checkpoint::new();
        c.push("a.weight", StoredTensor::F32(Tensor::randn([3, 4, 2], 1.0, &mut rng)));
        c.push("b", StoredTensor::F64(Tensor::randn([5], 1.0, &mut rng)));
        c.push("scalar", StoredTensor::F32(Tensor::scalar(f32::MIN_POSITIVE)));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back, c);
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let mut bytes = sample().encode();
        bytes[20] ^= 0x10;
        let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn layout_header() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"S3FK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        assert!(!dir.path().join("x.ckpt.partial").exists());
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
    }
}
