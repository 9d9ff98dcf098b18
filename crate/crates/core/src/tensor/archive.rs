//! Flat parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MTGLABCK"
//! version  u32
//! count    u32
//! entry*   path_len u32 | path utf-8 | ndim u32 | dims u64 * ndim | values f64 * numel
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTGLABCK";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn write_archive<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (path, t) in entries {
        w.write_all(&(path.len() as u32).to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != ARCHIVE_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported schema version {version}"),
        ));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut path = vec![0u8; len];
        r.read_exact(&mut path)?;
        let path = String::from_utf8(path)
            .map_err(|e| Error::format("checkpoint", format!("path is not utf-8: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((path, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = vec![
            (
                "enc.w".to_string(),
                Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            ),
            ("enc.b".to_string(), Tensor::vector(vec![0.1, 0.2])),
            ("s".to_string(), Tensor::scalar(std::f64::consts::PI)),
        ];
        let mut buf = Vec::new();
        write_archive(&mut buf, &entries).unwrap();
        let back = read_archive(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for ((p0, t0), (p1, t1)) in entries.iter().zip(&back) {
            assert_eq!(p0, p1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
    }

    #[test]
    fn rejects_wrong_version() {
        let mut buf = Vec::new();
        write_archive(&mut buf, &[]).unwrap();
        buf[8] = 9;
        assert!(matches!(
            read_archive(buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }
}
