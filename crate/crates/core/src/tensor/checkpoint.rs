//! Binary checkpoint codec.
//!
//! Layout, all little-endian:
//!   magic "MRPD" | version u16 | count u32
//!   then per tensor:
//!   name_len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8
//!   | dims u32 x rank | payload f32 x numel
//!
//! Floats are written as raw bit patterns, so a round trip is byte-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRPD";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_checkpoint<'a>(
    path: &Path,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(entries.len()).expect("tensor count fits u32").to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        assert!(t.rank() <= u8::MAX as usize, "tensor rank too large");
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F32);
        buf.push(t.rank() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of file reading {what} ({n} bytes wanted, {} left)", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = cur.u32("tensor count")? as usize;

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let ctx = format!("tensor {i}");
        let name_len = cur.u16(&format!("{ctx} name length"))? as usize;
        let name_pos = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, &format!("{ctx} name"))?)
            .map_err(|e| Error::format(name_pos as u64, format!("{ctx} name is not utf-8: {e}")))?
            .to_string();
        let dtype_pos = cur.pos;
        let dtype = cur.u8(&format!("{name} dtype"))?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(dtype_pos as u64, format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = cur.u8(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(cur.u32(&format!("{name} dim {d}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4, &format!("{name} payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    if cur.pos != buf.len() {
        return Err(Error::format(cur.pos as u64, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor)> {
        vec![
            ("a.w".to_string(), Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.0, f32::MIN_POSITIVE, 3.25, -0.125]).unwrap()),
            ("a.b".to_string(), Tensor::from_vec(vec![0.5, 1.0e-38, -7.75])),
            ("s".to_string(), Tensor::scalar(42.0)),
        ]
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let entries = sample_entries();
        write_checkpoint(&path, entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let first = std::fs::read(&path).unwrap();

        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape, t1.shape);
            // compare bit patterns, not float equality
            let bits0: Vec<u32> = t0.data.iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }

        let path2 = dir.path().join("t2.ckpt");
        write_checkpoint(&path2, loaded.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x00\x00").unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let entries = sample_entries();
        write_checkpoint(&path, entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format { offset, detail }) => {
                assert!(offset > 0);
                assert!(detail.contains("unexpected end of file"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format { offset: 4, detail }) => assert!(detail.contains("version"), "{detail}"),
            other => panic!("expected version error at offset 4, got {other:?}"),
        }
    }
}
