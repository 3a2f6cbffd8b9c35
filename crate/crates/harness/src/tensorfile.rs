//! `SQT1` tensor container.
//!
//! Each record: magic `SQT1`, `u32` version, `u32` name length, UTF-8 name,
//! `u32` ndim, `u64` per dim, `u8` dtype (0 = f32, 1 = f64), then the
//! row-major payload. All integers and floats are little-endian. A file is
//! any number of records back to back.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use seer_core::{Matrix, Real};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"SQT1";
pub const VERSION: u32 = 1;
const MAX_NDIM: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(HarnessError::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let t = Self {
            name: name.into(),
            dims,
            data,
        };
        let want = element_count(&t.dims)?;
        if want != t.data.len() {
            return Err(HarnessError::Format(format!(
                "tensor {:?}: dims {:?} need {want} elements, got {}",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        Ok(t)
    }

    /// Stores `m` with its native precision (f32 or f64).
    pub fn from_matrix<T: Real>(name: impl Into<String>, m: &Matrix<T>) -> Self {
        let dims = vec![m.rows() as u64, m.cols() as u64];
        let data = if std::mem::size_of::<T>() == 4 {
            TensorData::F32(m.as_slice().iter().map(|x| x.as_f64() as f32).collect())
        } else {
            TensorData::F64(m.as_slice().iter().map(|x| x.as_f64()).collect())
        };
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, x: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![1],
            data: TensorData::F64(vec![x]),
        }
    }

    /// Reads a 2-D tensor, converting to `T`.
    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        let (r, c) = match self.dims.as_slice() {
            [r, c] => (*r as usize, *c as usize),
            [n] => (1, *n as usize),
            other => {
                return Err(HarnessError::Format(format!(
                    "tensor {:?} has {} dims, expected 2",
                    self.name,
                    other.len()
                )))
            }
        };
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        };
        Ok(Matrix::new(r, c, data)?)
    }

    pub fn as_scalar(&self) -> Result<f64> {
        match self.data.to_f64().as_slice() {
            [x] => Ok(*x),
            _ => Err(HarnessError::Format(format!(
                "tensor {:?} is not a scalar",
                self.name
            ))),
        }
    }
}

fn element_count(dims: &[u64]) -> Result<usize> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| HarnessError::Format(format!("dims {dims:?} overflow")))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    element_count(&t.dims)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let name = t.name.as_bytes();
    w.write_all(
        &u32::try_from(name.len())
            .map_err(|_| HarnessError::Format("name too long".into()))?
            .to_le_bytes(),
    )?;
    w.write_all(name)?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[t.data.dtype().code()])?;
    match &t.data {
        TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
    }
    Ok(())
}

pub fn write_tensors(w: &mut impl Write, tensors: &[Tensor]) -> Result<()> {
    tensors.iter().try_for_each(|t| write_tensor(w, t))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads one record, or `None` at a clean end of input.
pub fn read_tensor(r: &mut impl Read) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(HarnessError::Format("truncated magic".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &magic != MAGIC {
        return Err(HarnessError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let name_len = read_u32(r)? as u64;
    let mut name = Vec::new();
    r.by_ref().take(name_len).read_to_end(&mut name)?;
    if name.len() as u64 != name_len {
        return Err(HarnessError::Format("truncated name".into()));
    }
    let name =
        String::from_utf8(name).map_err(|_| HarnessError::Format("name is not UTF-8".into()))?;
    let ndim = read_u32(r)?;
    if ndim > MAX_NDIM {
        return Err(HarnessError::Format(format!(
            "tensor {name:?} has {ndim} dims"
        )));
    }
    let dims = (0..ndim).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = DType::from_code(code[0])?;
    let count = element_count(&dims)?;
    let bytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| HarnessError::Format("payload size overflows".into()))?;
    // Grows with the data actually present, so a lying header cannot force a huge allocation.
    let mut payload = Vec::new();
    r.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(HarnessError::Format(format!(
            "tensor {name:?}: payload has {} of {bytes} bytes",
            payload.len()
        )));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Some(Tensor { name, dims, data }))
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    read_tensors(&mut BufReader::new(File::open(path)?))
}

/// Finds a tensor by name.
pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| HarnessError::Format(format!("missing tensor {name:?}")))
}
