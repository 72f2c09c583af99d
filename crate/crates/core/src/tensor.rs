//! Dense row-major FP32 tensors with an optional FP64 shadow.
//!
//! FP32 is the only execution dtype. The shadow carries FP64 values produced by
//! the reference executor and is never used for protocol-visible bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes of the binary tensor file.
pub const TENSOR_MAGIC: &[u8; 4] = b"NAOT";
pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shapes differ: {0:?} vs {1:?}")]
    Incompatible(Vec<usize>, Vec<usize>),
    #[error("invalid range: lo={lo} must be < hi={hi}")]
    InvalidRange { lo: f32, hi: f32 },
    #[error("malformed tensor file: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}

/// Immutable dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shadow: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting NaN/Inf payloads.
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::check_len(&shape, values.len())?;
        if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                index,
                value: *v as f64,
            });
        }
        Ok(Self {
            shape,
            data: values,
            shadow: None,
        })
    }

    /// Builds a tensor without the finiteness check.
    pub fn new_allow_nonfinite(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::check_len(&shape, values.len())?;
        Ok(Self {
            shape,
            data: values,
            shadow: None,
        })
    }

    /// FP32 tensor rounded from FP64 values, keeping the originals as shadow.
    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let data = values.iter().map(|&v| v as f32).collect();
        let mut t = Self::new(shape, data)?;
        t.shadow = Some(values);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            shadow: None,
        }
    }

    pub fn scalar(v: f32) -> Result<Self, TensorError> {
        Self::new(vec![1], vec![v])
    }

    fn check_len(shape: &[usize], len: usize) -> Result<(), TensorError> {
        let expected = numel(shape);
        if expected != len {
            return Err(TensorError::ShapeMismatch {
                shape: shape.to_vec(),
                expected,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shadow(&self) -> Option<&[f64]> {
        self.shadow.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Payload widened to FP64 (ignores the shadow).
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// FP64 view: the shadow when present, otherwise the widened payload.
    pub fn values_f64(&self) -> Vec<f64> {
        match &self.shadow {
            Some(s) => s.clone(),
            None => self.to_f64(),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::check_len(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data.clone(),
            shadow: self.shadow.clone(),
        })
    }

    /// Element-wise sum with another tensor of the same shape. Used for fault
    /// injection and attack perturbations.
    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Incompatible(
                self.shape.clone(),
                other.shape.clone(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// True when both payloads are identical bit for bit.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Max over elements of `|a_i - b_i|`, evaluated in FP64.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::Incompatible(a.shape.clone(), b.shape.clone()));
    }
    Ok(a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max))
}

/// Payload of a decoded tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub payload: TensorPayload,
}

impl TensorFile {
    pub fn dtype_code(&self) -> u8 {
        match self.payload {
            TensorPayload::F32(_) => 0,
            TensorPayload::F64(_) => 1,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
        out.push(self.dtype_code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            TensorPayload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorPayload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], TensorError> {
            if cur.len() < n {
                return Err(TensorError::Malformed("truncated".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != TENSOR_MAGIC {
            return Err(TensorError::Malformed("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != TENSOR_FILE_VERSION {
            return Err(TensorError::Malformed(format!("unsupported version {version}")));
        }
        let dtype = take(1)?[0];
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n = numel(&shape);
        let payload = match dtype {
            0 => TensorPayload::F32(
                take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorPayload::F64(
                take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(TensorError::Malformed(format!("unknown dtype {other}"))),
        };
        if !cur.is_empty() {
            return Err(TensorError::Malformed("trailing bytes".into()));
        }
        Ok(Self { shape, payload })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TensorError> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TensorError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }

    pub fn into_tensor(self) -> Result<Tensor, TensorError> {
        match self.payload {
            TensorPayload::F32(v) => Tensor::new(self.shape, v),
            TensorPayload::F64(v) => Tensor::from_f64(self.shape, v),
        }
    }
}

impl From<&Tensor> for TensorFile {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape.clone(),
            payload: TensorPayload::F32(t.data.clone()),
        }
    }
}

pub fn write_tensor_file(path: &std::path::Path, t: &Tensor) -> Result<(), TensorError> {
    std::fs::write(path, TensorFile::from(t).encode())?;
    Ok(())
}

pub fn read_tensor_file(path: &std::path::Path) -> Result<Tensor, TensorError> {
    TensorFile::decode(&std::fs::read(path)?)?.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.shadow().is_none());

        let e = Tensor::new(vec![0], vec![]).unwrap();
        assert!(e.is_empty());

        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new_allow_nonfinite(vec![2], vec![1.0, f32::NAN]).is_ok());
        assert!(matches!(
            Tensor::new(vec![3], vec![1.0]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn max_abs_diff_basic() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 2.5]).unwrap();
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.5);
        let c = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(max_abs_diff(&a, &c).is_err());
    }

    #[test]
    fn file_roundtrip_both_dtypes() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 3.25, 0.0, 7.0, -0.125]).unwrap();
        let bytes = TensorFile::from(&t).encode();
        assert_eq!(&bytes[..4], b"NAOT");
        assert_eq!(bytes[8], 0);
        assert_eq!(TensorFile::decode(&bytes).unwrap().into_tensor().unwrap(), t);

        let f = TensorFile {
            shape: vec![2],
            payload: TensorPayload::F64(vec![1e-300, -2.5]),
        };
        assert_eq!(TensorFile::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn file_rejects_garbage() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = TensorFile::from(&t).encode();
        bytes.push(0);
        assert!(TensorFile::decode(&bytes).is_err());
        assert!(TensorFile::decode(b"NAOX").is_err());
    }
}
