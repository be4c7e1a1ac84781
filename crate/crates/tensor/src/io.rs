//! Binary tensor snapshots and named-tensor containers.
//!
//! Snapshot layout (little endian): `b"MPTN"`, `u8` dtype (0 = f32, 1 = f64),
//! `u8` rank, `rank` x `u32` dims, then the row-major payload.
//!
//! Container layout: `b"MPCK"`, `u32` entry count, then per entry a `u32`
//! name length, the UTF-8 name, a `u64` blob length and one snapshot blob.
//! Entries are written in the order given (callers pass lexicographic order).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MPTN";
pub const CONTAINER_MAGIC: &[u8; 4] = b"MPCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(TensorError::Format(format!("rank {} too large", t.rank())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype as u8, t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad tensor magic {magic:?}")));
    }
    let [dtype, rank] = read_array::<2, _>(r)?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_array(r)?) as usize);
    }
    let numel: usize = shape.iter().product();
    let data = match dtype {
        0 => (0..numel)
            .map(|_| read_array::<4, _>(r).map(|b| f32::from_le_bytes(b) as f64))
            .collect::<Result<Vec<_>>>()?,
        1 => (0..numel)
            .map(|_| read_array::<8, _>(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?,
        other => return Err(TensorError::Format(format!("unknown dtype code {other}"))),
    };
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, dtype)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}

pub fn write_container<'a, W: Write>(
    w: &mut W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: DType,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let mut blob = Vec::new();
        write_tensor(&mut blob, t, dtype)?;
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        w.write_all(&blob)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != CONTAINER_MAGIC {
        return Err(TensorError::Format(format!("bad container magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_array(r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let blob_len = u64::from_le_bytes(read_array(r)?) as usize;
        let mut blob = vec![0u8; blob_len];
        r.read_exact(&mut blob)?;
        out.push((name, read_tensor(&mut blob.as_slice())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"MPTN");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &3u32.to_le_bytes());
        assert_eq!(&buf[14..22], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 14 + 6 * 8);
    }

    #[test]
    fn f32_snapshot_rounds() {
        let t = Tensor::new(&[1], vec![0.1]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        assert_eq!(buf[4], 0);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"XXXX\x01\x00".to_vec();
        assert!(matches!(read_tensor(&mut bytes.as_slice()), Err(TensorError::Format(_))));
    }

    #[test]
    fn container_preserves_names_and_order() {
        let a = Tensor::scalar(3.5);
        let b = Tensor::from_fn(&[2, 2], |i| i as f64);
        let mut buf = Vec::new();
        write_container(&mut buf, [("alpha", &a), ("beta.w", &b)], DType::F64).unwrap();
        let back = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[1].1, b);
    }
}
