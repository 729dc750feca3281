//! Binary weight files.
//!
//! Layout (little-endian): magic `OFTW`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32` extents,
//! and the values as `f32`.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OFTW";
pub const VERSION: u32 = 1;

pub fn write_weights<T: Real, W: Write>(mut out: W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&len_u32(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&len_u32(name.len())?.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&len_u32(t.rank())?.to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&len_u32(e)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for &v in t.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_weights<T: Real, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::WeightFormat(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut input).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(tensors)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::WeightFormat(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::WeightFormat("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &[("ab", &t)]).unwrap();
        let mut want = b"OFTW".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
        let back: Vec<(String, Tensor<f32>)> = read_weights(&buf[..]).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_weights::<f32, _>(&b"OFTX\x01\0\0\0\0\0\0\0"[..]), Err(Error::WeightFormat(_))));
        let t = Tensor::<f32>::full(&[3], 1.0);
        let mut buf = Vec::new();
        write_weights(&mut buf, &[("w", &t)]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_weights::<f32, _>(&buf[..]), Err(Error::WeightFormat(_))));
    }
}
