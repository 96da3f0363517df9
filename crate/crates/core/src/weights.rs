//! Named-tensor container used for backbone weights and inside checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "AWCCTENS"
//! version   u32      1
//! count     u32
//! entries   count × { name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!                     ndim u32, dims ndim × u64, values }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AWCCTENS";
pub const VERSION: u32 = 1;

/// Append-only little-endian encoder.
#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn values<T: Scalar>(&mut self, v: &[T]) {
        self.buf.reserve(v.len() * T::DTYPE.width());
        for &x in v {
            x.write_le(&mut self.buf);
        }
    }

    pub fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u8(T::DTYPE.tag());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.values(t.data());
    }
}

/// Bounds-checked little-endian decoder.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Corrupt(format!("invalid utf-8: {e}")))
    }

    /// Reads `n` values stored as `dtype`, converting to `T`.
    pub fn values<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        Ok(match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::read_le(c))))
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        })
    }

    pub fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown dtype tag {tag}")))?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("implausible tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?;
        let data = self.values(dtype, n)?;
        Tensor::from_vec(&shape, data)
    }
}

pub(crate) fn encode_named<'a, T: Scalar>(w: &mut Writer, entries: impl Iterator<Item = (&'a str, &'a Tensor<T>)>) {
    let entries: Vec<_> = entries.collect();
    w.u32(entries.len() as u32);
    for (name, t) in entries {
        w.str(name);
        w.tensor(t);
    }
}

pub(crate) fn decode_named<T: Scalar>(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<T>)>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_file<'a, T: Scalar>(path: &Path, entries: impl Iterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    encode_named(&mut w, entries);
    fs::write(path, &w.buf).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Corrupt(format!("{}: not a named-tensor file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let entries = decode_named(&mut r)?;
    if !r.is_at_end() {
        return Err(Error::Corrupt(format!("{}: trailing bytes", path.display())));
    }
    Ok(entries)
}
