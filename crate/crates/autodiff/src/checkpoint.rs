//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PSCK" | version u16 | meta_len u32 | meta (UTF-8)
//! count u32 | count x { name_len u16, name, ndim u8, dims u32*ndim, dtype u8, offset u64 }
//! payload_len u64 | payload | crc32 u32 (over every preceding byte)
//! ```
//!
//! Offsets are byte offsets into the payload. Training checkpoints use the
//! f32 dtype.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PSCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form metadata, typically JSON with the resolved config.
    pub meta: String,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.as_bytes();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());

        let mut payload = Vec::new();
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.ndim() > u8::MAX as usize {
                return Err(AutodiffError::Format(format!("entry {name} too large")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(T::DTYPE.code());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| AutodiffError::Format(m.to_string());
        if bytes.len() < 4 + 2 + 4 + 4 + 8 + 4 {
            return Err(fmt("file too short"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if &body[..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        if crc32fast::hash(body) != stored {
            return Err(fmt("crc mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(AutodiffError::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| fmt("meta is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| fmt("name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| fmt("unknown dtype"))?;
            if dtype != T::DTYPE {
                return Err(AutodiffError::Format(format!(
                    "tensor {name} has dtype {dtype:?}, expected {:?}",
                    T::DTYPE
                )));
            }
            let offset = r.u64()? as usize;
            headers.push((name, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != body.len() {
            return Err(fmt("trailing bytes before crc"));
        }
        let size = T::DTYPE.size();
        let mut entries = Vec::with_capacity(headers.len());
        for (name, shape, offset) in headers {
            let numel: usize = shape.iter().product();
            let end = offset
                .checked_add(numel * size)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| AutodiffError::Format(format!("tensor {name} exceeds payload")))?;
            let data = payload[offset..end].chunks_exact(size).map(T::read_le).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut ck = Checkpoint::new("{\"k\":1}");
        ck.push("a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        ck.push("b", Tensor::scalar(42.0));
        ck
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn dtype_mismatch_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(AutodiffError::Format(_))
        ));
    }
}
