//! Binary tensor serialization.
//!
//! Little-endian format: magic `RGT1`, `u32` rank, `u32` per dimension, then
//! the payload as raw 64-bit floats in row-major order. The on-disk payload
//! is always `f64`; 32-bit tensors widen on save and narrow on load.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"RGT1";
const MAX_RANK: u32 = 8;

pub fn write_tensor<W: Write, T: Scalar>(w: &mut W, dims: &[usize], data: &[T]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK as usize {
        return Err(Error::InvalidArgument(format!(
            "tensor rank must be in 1..={MAX_RANK}"
        )));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "dims {:?} do not match {} values",
            dims,
            data.len()
        )));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read, T: Scalar>(r: &mut R) -> Result<(Vec<usize>, Vec<T>)> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    read_exact_or_truncated(r, &mut buf4)?;
    let rank = u32::from_le_bytes(buf4);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::InvalidArgument(format!("bad tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        read_exact_or_truncated(r, &mut buf4)?;
        let d = u32::from_le_bytes(buf4) as usize;
        if d == 0 {
            return Err(Error::InvalidArgument("zero-sized dimension".into()));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf8 = [0u8; 8];
    for _ in 0..count {
        read_exact_or_truncated(r, &mut buf8)?;
        let v = f64::from_le_bytes(buf8);
        if !v.is_finite() {
            return Err(Error::NonFinite("tensor file payload".into()));
        }
        data.push(T::from_f64(v));
    }
    Ok((dims, data))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}

pub fn save_raw_tensor<T: Scalar>(path: &Path, dims: &[usize], data: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, dims, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_raw_tensor<T: Scalar>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dims = vec![2, 3];
        let data = vec![1.0f64, -2.5, 3.25, 0.0, 5.5, -6.125];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &dims, &data).unwrap();
        let (d2, v2): (Vec<usize>, Vec<f64>) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(d2, dims);
        assert_eq!(v2, data);
    }

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[1], &[1.0f64]).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_tensor::<_, f64>(&mut buf.as_slice()),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn truncated() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[4], &[1.0f64, 2.0, 3.0, 4.0]).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(
            read_tensor::<_, f64>(&mut buf.as_slice()),
            Err(Error::Truncated)
        ));
    }

    #[test]
    fn f32_widening_roundtrip() {
        let data = vec![1.5f32, -0.25, 3.0];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[3], &data).unwrap();
        let (_, v): (Vec<usize>, Vec<f32>) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(v, data);
    }
}
