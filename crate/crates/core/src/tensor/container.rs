//! `HSVT` binary tensor container.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `HSVT` |
//! | 2 | version: 1 = f32 payload, 2 = f64 payload |
//! | 2 | rank |
//! | 4 * rank | dims, u32 |
//! | 4 or 8 * numel | payload, row-major |
//!
//! Version 1 is the interchange format (datasets, attention dumps). Version 2
//! exists so that checkpoints round-trip 64-bit parameters losslessly.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSVT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u16 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

pub fn write_container_bytes(tensor: &Tensor, precision: Precision) -> Vec<u8> {
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + width * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&precision.version().to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u16).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => tensor.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => tensor.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Parses one container from the front of `bytes`; returns the tensor and
/// the number of bytes consumed.
pub fn read_container_bytes(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| "truncated container".to_string());
    if take(0, 4)? != MAGIC {
        return Err("bad magic, expected HSVT".into());
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    let width = match version {
        1 => 4,
        2 => 8,
        v => return Err(format!("unsupported version {v}")),
    };
    let rank = u16::from_le_bytes(take(6, 2)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32::from_le_bytes(take(8 + 4 * i, 4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let start = 8 + 4 * rank;
    let payload = take(start, n * width)?;
    let data: Vec<f64> = if width == 4 {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    } else {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let tensor = Tensor::new(data, &shape).map_err(|e| e.to_string())?;
    Ok((tensor, start + n * width))
}

pub fn write_container(path: impl AsRef<Path>, tensor: &Tensor, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_container_bytes(tensor, precision)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensor, used) = read_container_bytes(&bytes).map_err(|r| Error::format(path, r))?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1.0, -2.5], &[1, 2]).unwrap();
        let bytes = write_container_bytes(&t, Precision::F32);
        let mut expect = b"HSVT".to_vec();
        expect.extend([1, 0, 2, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn f64_version_is_lossless() {
        let t = Tensor::new(vec![0.1, 1.0 / 3.0, -7.25e-300], &[3]).unwrap();
        let (back, used) = read_container_bytes(&write_container_bytes(&t, Precision::F64)).unwrap();
        assert_eq!(used, 8 + 4 + 24);
        assert_eq!(back.data(), t.data());
        assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_container_bytes(b"NOPE\x01\x00\x00\x00").is_err());
        assert!(read_container_bytes(b"HSVT\x09\x00\x00\x00").is_err());
        assert!(read_container_bytes(b"HSVT\x01\x00\x01\x00\x05\x00\x00\x00").is_err());
    }
}
