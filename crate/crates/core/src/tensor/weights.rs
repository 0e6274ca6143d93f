//! `KAW1` weights files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! b"KAW1" | version | count | count x record
//! record := name_len | name (UTF-8) | rank | rank x dim | prod(dims) x f32 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KAW1";
pub const WEIGHTS_VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor<f32>);

pub fn write_weights_to<W: Write>(mut out: W, tensors: &[NamedTensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_weights(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_weights_to(BufWriter::new(File::create(path)?), tensors)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_weights_from<R: Read>(mut r: R, origin: &Path) -> Result<Vec<NamedTensor>> {
    let bad = |m: String| Error::format(origin, m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected KAW1")));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(bad(format!("unsupported weights version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn read_weights(path: &Path) -> Result<Vec<NamedTensor>> {
    read_weights_from(BufReader::new(File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&mut buf, &[("ab".into(), t)]).unwrap();
        let mut expected = b"KAW1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        assert!(read_weights_from(&b"KAW2\x01\0\0\0\0\0\0\0"[..], p).is_err());
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&mut buf, &[("w".into(), t)]).unwrap();
        assert!(read_weights_from(&buf[..buf.len() - 1], p).is_err());
        buf.push(0);
        assert!(read_weights_from(&buf[..], p).is_err());
    }
}
