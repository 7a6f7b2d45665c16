//! Binary checkpoint format.
//!
//! ```text
//! "GRSM"            magic
//! u32               format version
//! u32               parameter count
//! per parameter:
//!   u16 + bytes     UTF-8 name
//!   u8              dtype (0 = f32, 1 = f64)
//!   u8              rank
//!   u32 * rank      dims
//!   values          row-major, little-endian
//! ```
//!
//! Values are written as f64, so a save/load round trip is bit-exact. f32
//! payloads are accepted on load and widened.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::dense::Tensor;
use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GRSM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn encode(entries: &[(String, Tensor)], dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(dtype as u8);
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
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
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = match dtype {
            0 => c
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            1 => c
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype {other} for {name}"))),
        };
        out.push((name, Tensor::new(dims, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    let entries: Vec<_> = store
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    let bytes = encode(&entries, DType::F64)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Overwrites values of `store` from a checkpoint. Every stored parameter
/// must exist in the checkpoint with the same shape, and the checkpoint may
/// not carry extra names.
pub fn load_into(store: &mut ParameterStore, path: &Path) -> Result<()> {
    let entries = read(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store.set_value(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("ab".into(), t)], DType::F64).unwrap();
        assert_eq!(&bytes[..4], b"GRSM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 2);
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1); // f64
        assert_eq!(bytes[17], 2); // rank
        assert_eq!(bytes.len(), 18 + 8 + 16);
    }

    #[test]
    fn f32_payload_widens() {
        let t = Tensor::new(vec![2], vec![0.5, 1.25]).unwrap();
        let bytes = encode(&[("x".into(), t.clone())], DType::F32).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1, t);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        let t = Tensor::scalar(1.0);
        let mut bytes = encode(&[("x".into(), t)], DType::F64).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
