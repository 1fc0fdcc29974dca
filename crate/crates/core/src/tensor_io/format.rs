//! The `PPDL` tensor file format.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "PPDL"
//! 4       2          format version, u16 LE (= 1)
//! 6       1          dtype code (0 = f32, 1 = f64, 2 = i32, 3 = u8)
//! 7       1          rank (1..=4)
//! 8       8 * rank   dims, u64 LE
//! ...     payload    row-major elements, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PPDL";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"PPDL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0} (1..=4 allowed)")]
    UnsupportedRank(usize),
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("truncated payload: header declares {declared} bytes, file has {actual}")]
    TruncatedPayload { declared: u64, actual: u64 },
    #[error("expected dtype {expected:?}, found {found:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("expected rank {expected}, found shape {found:?}")]
    RankMismatch { expected: usize, found: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::U8,
            other => return Err(TensorError::UnsupportedDtype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(TensorError::UnsupportedRank(shape.len()));
        }
        if shape.contains(&0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_f64<D: ndarray::Dimension>(array: &ndarray::Array<f64, D>) -> Result<Self, TensorError> {
        Self::new(array.shape().to_vec(), TensorData::F64(array.iter().copied().collect()))
    }

    pub fn from_i32<D: ndarray::Dimension>(array: &ndarray::Array<i32, D>) -> Result<Self, TensorError> {
        Self::new(array.shape().to_vec(), TensorData::I32(array.iter().copied().collect()))
    }

    /// Floating-point values widened to f64. Integer tensors are rejected.
    pub fn to_f64_array(&self) -> Result<ArrayD<f64>, TensorError> {
        let values = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            other => {
                return Err(TensorError::DtypeMismatch {
                    expected: DType::F64,
                    found: other.dtype(),
                })
            }
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&self.shape), values).expect("shape checked at construction"))
    }

    /// Integer values widened to i64. Float tensors are rejected.
    pub fn to_i64_array(&self) -> Result<ArrayD<i64>, TensorError> {
        let values = match &self.data {
            TensorData::I32(v) => v.iter().map(|&x| i64::from(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| i64::from(x)).collect(),
            other => {
                return Err(TensorError::DtypeMismatch {
                    expected: DType::I32,
                    found: other.dtype(),
                })
            }
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&self.shape), values).expect("shape checked at construction"))
    }

    fn expect_rank(&self, rank: usize) -> Result<(), TensorError> {
        if self.shape.len() == rank {
            Ok(())
        } else {
            Err(TensorError::RankMismatch {
                expected: rank,
                found: self.shape.clone(),
            })
        }
    }

    pub fn to_array2_f64(&self) -> Result<Array2<f64>, TensorError> {
        self.expect_rank(2)?;
        Ok(self.to_f64_array()?.into_dimensionality().expect("rank checked"))
    }

    pub fn to_array3_f64(&self) -> Result<Array3<f64>, TensorError> {
        self.expect_rank(3)?;
        Ok(self.to_f64_array()?.into_dimensionality().expect("rank checked"))
    }

    pub fn to_array4_f64(&self) -> Result<Array4<f64>, TensorError> {
        self.expect_rank(4)?;
        Ok(self.to_f64_array()?.into_dimensionality().expect("rank checked"))
    }

    pub fn payload_bytes(&self) -> usize {
        self.len() * self.dtype().size()
    }

    /// Serialize header and payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        if self.shape.is_empty() || self.shape.len() > MAX_RANK {
            return Err(TensorError::UnsupportedRank(self.shape.len()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype().code(), self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            TensorData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            TensorData::U8(v) => w.write_all(v)?,
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a complete tensor image; trailing or missing payload bytes are
    /// both reported as [`TensorError::TruncatedPayload`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let header_err = |n: usize| TensorError::TruncatedPayload {
            declared: n as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 8 {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(TensorError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(header_err(8));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(bytes[6])?;
        let rank = bytes[7] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::UnsupportedRank(rank));
        }
        let header_len = 8 + 8 * rank;
        if bytes.len() < header_len {
            return Err(header_err(header_len));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let at = 8 + 8 * i;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| TensorError::ZeroDimension(vec![]))?);
        }
        if shape.contains(&0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(TensorError::UnsupportedRank(rank))?;
        let declared = count as u64 * dtype.size() as u64;
        let payload = &bytes[header_len..];
        if payload.len() as u64 != declared {
            return Err(TensorError::TruncatedPayload {
                declared,
                actual: payload.len() as u64,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + self.payload_bytes());
        self.write_to(&mut out)?;
        Ok(out)
    }
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let file = File::create(path)?;
    tensor.write_to(BufWriter::new(file))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Tensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_f32_zeros_is_forty_bytes() {
        let t = Tensor::new(vec![2, 2], TensorData::F32(vec![0.0; 4])).unwrap();
        let bytes = t.to_bytes().unwrap();
        // magic + version + dtype + rank + 2 dims + 4 f32
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 16 + 16);
        assert_eq!(&bytes[..4], b"PPDL");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 2);
    }

    #[test]
    fn scalar_shaped_round_trip() {
        let t = Tensor::new(vec![1], TensorData::F64(vec![-3.25])).unwrap();
        assert_eq!(Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap(), t);
    }

    #[test]
    fn rank_five_is_unsupported() {
        let err = Tensor::new(vec![1; 5], TensorData::U8(vec![0])).unwrap_err();
        assert!(matches!(err, TensorError::UnsupportedRank(5)));
        assert!(err.to_string().contains("unsupported rank"));
    }

    #[test]
    fn bad_magic() {
        let t = Tensor::new(vec![2], TensorData::I32(vec![1, 2])).unwrap();
        let mut bytes = t.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&bytes), Err(TensorError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn unsupported_version_and_dtype() {
        let t = Tensor::new(vec![2], TensorData::I32(vec![1, 2])).unwrap();
        let mut bytes = t.to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Tensor::from_bytes(&bytes), Err(TensorError::UnsupportedVersion(2))));
        let mut bytes = t.to_bytes().unwrap();
        bytes[6] = 9;
        assert!(matches!(Tensor::from_bytes(&bytes), Err(TensorError::UnsupportedDtype(9))));
    }

    #[test]
    fn truncated_payload() {
        // 4 f32 = 16 declared payload bytes, keep only 8
        let t = Tensor::new(vec![4], TensorData::F32(vec![1.0; 4])).unwrap();
        let bytes = t.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 8];
        match Tensor::from_bytes(cut) {
            Err(TensorError::TruncatedPayload { declared, actual }) => {
                assert_eq!((declared, actual), (16, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppdl");
        let t = Tensor::new(vec![2, 3], TensorData::U8(vec![1, 2, 3, 4, 5, 6])).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn element_count_checked() {
        assert!(matches!(
            Tensor::new(vec![2, 2], TensorData::F64(vec![0.0; 3])),
            Err(TensorError::ElementCount { expected: 4, actual: 3, .. })
        ));
    }
}
