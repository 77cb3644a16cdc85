//! `FVT1` binary tensor files.
//!
//! Layout: magic `FVT1`, one dtype byte (0 = f32, 1 = f64), one rank byte,
//! `rank` little-endian u64 dimensions, then the little-endian payload with
//! the last dimension varying fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor as stored on disk. Values are widened to f64 on read.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dtype: DType::F64,
            shape,
            data,
        })
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} exceeds 255", self.shape.len())));
        }
        let mut out =
            Vec::with_capacity(6 + 8 * self.shape.len() + self.dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing FVT1 magic".into()));
        }
        let dtype = DType::from_byte(bytes[4])?;
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format(format!("truncated header for rank {rank}")));
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dimension overflow in {shape:?}")))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(dtype.width()) {
            return Err(Error::Format(format!(
                "payload of {} bytes does not match shape {shape:?} ({dtype:?})",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Self { dtype, shape, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(&bytes[..4], b"FVT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &1u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &2u64.to_le_bytes());
        assert_eq!(&bytes[22..30], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 16 + 16);
    }

    #[test]
    fn f32_payload() {
        let t = Tensor::new(vec![3], vec![0.5, 1.0, 2.0])
            .unwrap()
            .with_dtype(DType::F32);
        let bytes = t.encode().unwrap();
        assert_eq!(bytes.len(), 6 + 8 + 12);
        assert_eq!(Tensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(Tensor::decode(b"FVT2\x01\x00").is_err());
        assert!(Tensor::decode(b"FVT1\x07\x00").is_err());
        let mut bytes = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().encode().unwrap();
        bytes.pop();
        assert!(Tensor::decode(&bytes).is_err());
    }
}
