//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      7 bytes   e.g. "COSHVQ1"
//! version    u32
//! stage      u32 length + UTF-8
//! meta       u32 length + UTF-8 JSON (model config, schedule parameters)
//! count      u32
//! per tensor:
//!   name     u32 length + UTF-8
//!   ndim     u32, then ndim × u64 extents
//!   payload  row-major f64
//! crc32      u32 over every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC_LEN: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; MAGIC_LEN],
    pub version: u32,
    pub stage: String,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(magic: &[u8; MAGIC_LEN], stage: &str, meta: String) -> Self {
        Self {
            magic: *magic,
            version: FORMAT_VERSION,
            stage: stage.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Append every parameter of `store` in registration order.
    pub fn with_params(mut self, store: &ParamStore) -> Self {
        self.tensors
            .extend(store.iter().map(|p| (p.name.clone(), p.value.clone())));
        self
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Overwrite `store` values by name; shapes must agree.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// [`Self::load_into`] for tensors stored as `{prefix}{name}`.
    pub fn load_prefixed(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor(&format!("{prefix}{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{prefix}{}: shape mismatch", p.name)));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn push_prefixed(&mut self, store: &ParamStore, prefix: &str) {
        self.tensors
            .extend(store.iter().map(|p| (format!("{prefix}{}", p.name), p.value.clone())));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.stage);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse and verify; `magic` must match the expected stage container.
    pub fn from_bytes(bytes: &[u8], magic: &[u8; MAGIC_LEN]) -> Result<Self> {
        if bytes.len() < MAGIC_LEN + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let got: [u8; MAGIC_LEN] = r.take(MAGIC_LEN)?.try_into().expect("magic");
        if &got != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (this build reads {FORMAT_VERSION})"
            )));
        }
        let stage = r.string()?;
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            magic: got,
            version,
            stage,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &[u8; MAGIC_LEN]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes, magic)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(b"COSHTST", "test", r#"{"k":1}"#.into());
        c.push("a", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push("b", Tensor::scalar(std::f64::consts::PI));
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), b"COSHTST").unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((_, x), (_, y)) in c.tensors.iter().zip(&back.tensors) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = Checkpoint::from_bytes(&bytes, b"COSHTST").unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn wrong_magic_and_version() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes, b"COSHVQ1").is_err());
        let mut c = sample();
        c.version = 9;
        let err = Checkpoint::from_bytes(&c.to_bytes(), b"COSHTST").unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn truncated_file() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10], b"COSHTST").is_err());
    }
}
