//! RSVH binary tensor dump.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RSVH"            4 bytes magic
//! version           u32 (currently 1)
//! dtype             u32 (0 = f32, 1 = f64)
//! rank              u32
//! extents           rank × u64
//! payload           product(extents) values, f32 or f64 LE
//! ```

use std::io::{Read, Write};

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const RSVH_MAGIC: &[u8; 4] = b"RSVH";
pub const RSVH_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("tensor stream: {e}"))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(RSVH_MAGIC);
    buf.extend_from_slice(&RSVH_VERSION.to_le_bytes());
    buf.extend_from_slice(&t.dtype().code().to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != RSVH_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != RSVH_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let code = read_u32(r)?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io_err)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut payload = vec![0u8; numel * width];
    r.read_exact(&mut payload).map_err(io_err)?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(&shape, data, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::with_dtype(&[2, 1], vec![1.0, -2.0], DType::F32).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"RSVH".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&0u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_tensor(&mut &buf[..]).is_err());
    }
}
