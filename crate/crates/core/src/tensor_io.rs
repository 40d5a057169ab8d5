//! Binary container for preprocessed tensors and raw heatmaps.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                              |
//! |--------|-----------|------------------------------------|
//! | 0      | 4         | magic `CSTN`                       |
//! | 4      | 4         | format version (`u32`, currently 1)|
//! | 8      | 4         | rank `n` (`u32`)                   |
//! | 12     | 8 * n     | dimensions (`u64` each)            |
//! | ..     | 4 * prod  | row-major `f32` values             |

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CSTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    Version(u32),
    #[error("shape {shape:?} does not match {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("truncated tensor file")]
    Truncated,
}

pub fn encode(shape: &[usize], values: &[f32]) -> Result<Vec<u8>, TensorIoError> {
    let count: usize = shape.iter().product();
    if count != values.len() {
        return Err(TensorIoError::ShapeMismatch {
            shape: shape.to_vec(),
            len: values.len(),
        });
    }
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(mut bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), TensorIoError> {
    let mut take = |n: usize| -> Result<&[u8], TensorIoError> {
        if bytes.len() < n {
            return Err(TensorIoError::Truncated);
        }
        let (head, rest) = bytes.split_at(n);
        bytes = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(TensorIoError::Version(version));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    let raw = take(count.checked_mul(4).ok_or(TensorIoError::Truncated)?)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

pub fn write_tensor(path: &Path, shape: &[usize], values: &[f32]) -> Result<(), TensorIoError> {
    let bytes = encode(shape, values)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>), TensorIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[2, 1], &[1.0, -2.5]).unwrap();
        assert_eq!(&bytes[0..4], b"CSTN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = encode(&[3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(TensorIoError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(TensorIoError::BadMagic)));
        assert!(encode(&[2, 2], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let (s, v) = decode(&encode(&shape, &values).unwrap()).unwrap();
            prop_assert_eq!(s, shape);
            prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
