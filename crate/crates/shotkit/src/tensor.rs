//! Dense row-major tensors and their binary file format.
//!
//! All in-memory arithmetic is `f64`. Each tensor carries a [`Precision`]
//! tag that only matters at the file boundary: tensors declared `F32` are
//! narrowed to 32-bit floats on write and widened back on read, which is
//! exact for every value a 32-bit float can hold, so write/read round trips
//! are bit-identical.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! [16-byte magic "SHOTKIT.TENSOR1\0"]
//! [u32 tensor count]
//! per tensor:
//!   [u8 precision code: 4 = f32, 8 = f64]
//!   [u32 rank] [u32 extent × rank]
//!   [payload: product(extents) values in the declared precision]
//! ```

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// File magic for the binary tensor format, exactly 16 bytes.
pub const TENSOR_MAGIC: [u8; 16] = *b"SHOTKIT.TENSOR1\0";

/// Storage precision used when a tensor is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data holds {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("bad tensor file magic")]
    BadMagic,
    #[error("unknown precision code {0}")]
    BadPrecision(u8),
    #[error("tensor file truncated or oversized")]
    Corrupt,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            precision: Precision::F64,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            precision: Precision::F64,
        }
    }

    /// Same data, declared for 32-bit storage on disk.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() requires a rank-2 tensor");
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        assert_eq!(self.shape.len(), 2, "row_mut() requires a rank-2 tensor");
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    /// True when every element is exactly zero (either sign).
    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Errors unless `self` has exactly the given shape.
    pub fn expect_shape(&self, shape: &[usize]) -> Result<(), TensorError> {
        if self.shape != shape {
            return Err(TensorError::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Write a sequence of tensors in the binary format.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<(), TensorError> {
    w.write_all(&TENSOR_MAGIC)?;
    let count = u32::try_from(tensors.len()).map_err(|_| TensorError::Corrupt)?;
    w.write_all(&count.to_le_bytes())?;
    for t in tensors {
        w.write_all(&[t.precision.code()])?;
        let rank = u32::try_from(t.shape.len()).map_err(|_| TensorError::Corrupt)?;
        w.write_all(&rank.to_le_bytes())?;
        for &e in &t.shape {
            let e = u32::try_from(e).map_err(|_| TensorError::Corrupt)?;
            w.write_all(&e.to_le_bytes())?;
        }
        match t.precision {
            Precision::F32 => {
                for &v in &t.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Precision::F64 => {
                for &v in &t.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Read back a sequence of tensors written by [`write_tensors`].
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>, TensorError> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if magic != TENSOR_MAGIC {
        return Err(TensorError::BadMagic);
    }
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(map_eof)?;
        let precision =
            Precision::from_code(code[0]).ok_or(TensorError::BadPrecision(code[0]))?;
        let rank = read_u32(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        match precision {
            Precision::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..len {
                    r.read_exact(&mut buf).map_err(map_eof)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            Precision::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut buf).map_err(map_eof)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        tensors.push(Tensor {
            shape,
            data,
            precision,
        });
    }
    // Trailing bytes mean the file was not produced by this writer.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(tensors),
        _ => Err(TensorError::Corrupt),
    }
}

pub fn write_tensor_file<P: AsRef<Path>>(path: P, tensors: &[Tensor]) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file<P: AsRef<Path>>(path: P) -> Result<Vec<Tensor>, TensorError> {
    read_tensors(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(map_eof)?;
    Ok(u32::from_le_bytes(buf))
}

fn map_eof(e: io::Error) -> TensorError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        TensorError::Corrupt
    } else {
        TensorError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn roundtrip_f64_bytes_identical() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -7.0])
            .unwrap();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &[t.clone()]).unwrap();
        let back = read_tensors(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], t);

        let mut bytes2 = Vec::new();
        write_tensors(&mut bytes2, &back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn roundtrip_f32_bytes_identical() {
        let t = Tensor::new(vec![4], vec![1.5, -0.125, 3.0e7, -2.0])
            .unwrap()
            .with_precision(Precision::F32);
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &[t]).unwrap();
        let back = read_tensors(bytes.as_slice()).unwrap();
        assert_eq!(back[0].precision(), Precision::F32);
        let mut bytes2 = Vec::new();
        write_tensors(&mut bytes2, &back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = vec![0u8; 24];
        assert!(matches!(
            read_tensors(bytes.as_slice()),
            Err(TensorError::BadMagic)
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &[t]).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            read_tensors(bytes.as_slice()),
            Err(TensorError::Corrupt)
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &[t]).unwrap();
        bytes.push(0xAB);
        assert!(matches!(
            read_tensors(bytes.as_slice()),
            Err(TensorError::Corrupt)
        ));
    }
}
