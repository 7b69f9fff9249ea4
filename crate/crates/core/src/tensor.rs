//! Dense row-major arrays and the `MSST` binary tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | field                                   |
//! |----------------|-----------------------------------------|
//! | 4              | magic `MSST`                            |
//! | 4              | format version (`u32`, currently 1)     |
//! | 1              | dtype code (1 = `f32`, 2 = `f64`)       |
//! | 1              | ndim (≤ 8)                              |
//! | 8 × ndim       | dims (`u64`)                            |
//! | width × Πdims  | row-major payload                       |
//!
//! Feature files use `f32`. Checkpoints use `f64` so that a resumed run
//! continues from exactly the parameters it stopped at.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSST";
pub const FORMAT_VERSION: u32 = 1;
pub const MAX_DIMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Row-major `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape(format!("concat_rows: {} columns vs {cols}", p.cols())));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }

    pub fn l2_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Writes `array` as `f32` payload.
pub fn write_tensor(path: impl AsRef<Path>, array: &Tensor) -> Result<()> {
    write_tensor_as(path, array, DType::F32)
}

pub fn write_tensor_as(path: impl AsRef<Path>, array: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    if array.shape.len() > MAX_DIMS {
        return Err(Error::Shape(format!(
            "{} dimensions exceeds the maximum of {MAX_DIMS}",
            array.shape.len()
        )));
    }
    if let Some((index, value)) = array.first_non_finite() {
        return Err(Error::NonFinite { index, value });
    }
    let bytes = encode_tensor(array, dtype);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(array: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * array.shape.len() + dtype.width() * array.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(array.shape.len() as u8);
    for &d in &array.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in &array.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in &array.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|reason| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 10 {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| format!("unknown dtype {}", bytes[8]))?;
    let ndim = bytes[9] as usize;
    if ndim > MAX_DIMS {
        return Err(format!("ndim {ndim} exceeds {MAX_DIMS}"));
    }
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err("truncated dims".into());
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 10 + 8 * i;
            u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.width() {
        return Err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * dtype.width()
        ));
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
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.msst");
        write_tensor(&p, &Tensor::vector(vec![0.0])).unwrap();
        let bytes = fs::read(&p).unwrap();
        // magic + version + dtype + ndim + one dim + one f32
        assert_eq!(bytes.len(), 4 + 4 + 1 + 1 + 8 + 4);
        assert_eq!(&bytes[..4], b"MSST");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 1);
        assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 1);
        assert_eq!(&bytes[18..], &0.0f32.to_le_bytes());
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.msst");
        let z = Tensor::zeros(&[2, 3]);
        write_tensor(&p, &z).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), z);
    }

    #[test]
    fn nan_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.msst");
        let t = Tensor::vector(vec![1.0, 2.0, f64::NAN]);
        match write_tensor(&p, &t) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(!p.exists());
    }

    #[test]
    fn too_many_dims_rejected() {
        let t = Tensor::zeros(&[1; 9]);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_tensor(dir.path().join("x"), &t).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let r = write_tensor(blocker.join("sub.msst"), &Tensor::vector(vec![1.0]));
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_payload_detected() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[2, 2]), DType::F32);
        bytes.pop();
        assert!(decode_tensor(&bytes).is_err());
        let mut bad = encode_tensor(&Tensor::zeros(&[1]), DType::F32);
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Tensor::matrix(1, 3, vec![0.1, -1e-300, std::f64::consts::PI]).unwrap();
        let back = decode_tensor(&encode_tensor(&t, DType::F64)).unwrap();
        assert_eq!(back, t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn f32_round_trip_bit_exact(
                shape in proptest::collection::vec(1usize..4, 0..4),
                seed in any::<u64>(),
            ) {
                use rand::{Rng, SeedableRng};
                let n: usize = shape.iter().product();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<f64> = (0..n)
                    .map(|_| rng.gen_range(-1e6f32..1e6f32) as f64)
                    .collect();
                let t = Tensor::new(shape, data).unwrap();
                let back = decode_tensor(&encode_tensor(&t, DType::F32)).unwrap();
                prop_assert_eq!(back.shape(), t.shape());
                for (a, b) in back.data().iter().zip(t.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
