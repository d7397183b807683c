//! Binary parameter container.
//!
//! Layout: the 6-byte magic `NPMCA1`, then per tensor a `u32` name length,
//! the UTF-8 name, a `u32` rank, `rank` × `u64` dims and the values as
//! little-endian `f64`. All integers are little-endian. The file ends after
//! the last tensor.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"NPMCA1";

pub fn encode<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "not an NPMCA1 checkpoint".into() });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format { offset: at + 4, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Format {
            offset: r.pos,
            msg: "tensor size overflows".into(),
        })?;
        let payload = r.take(len.saturating_mul(8), "tensor data")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    fs::write(path, encode(&model.named_tensors()))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, disable_cm: bool) -> Result<Model<T>> {
    Model::from_named(&decode(&fs::read(path)?)?, disable_cm)
}
