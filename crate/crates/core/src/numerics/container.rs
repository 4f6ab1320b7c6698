//! Binary tensor container.
//!
//! Each record is the 4 magic bytes `ADK1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the `f32` payload little-endian in
//! row-major order. A file holds zero or more records back to back.

use std::io::Write;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ADK1";

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[&Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        encode_tensor(t, &mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Little-endian cursor that reports the byte offset of any shortfall.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(r.offset(), "tensor size overflows"))?;
    let data = r.f32s(n, "tensor payload")?;
    Tensor::new(shape, data)
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while !r.is_done() {
        out.push(decode_tensor(&mut r)?);
    }
    Ok(out)
}
