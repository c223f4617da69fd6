//! `XADV` binary tensor container.
//!
//! Layout (all little-endian):
//!
//! | offset | size    | field                                  |
//! |--------|---------|----------------------------------------|
//! | 0      | 4       | magic `XADV`                           |
//! | 4      | 2       | version (u16, currently 1)             |
//! | 6      | 2       | dtype code (u16: 1 = f32, 2 = u32)     |
//! | 8      | 4       | rank (u32)                             |
//! | 12     | 8*rank  | dims (u64 each)                        |
//! | ...    | 4*numel | payload, 32-bit elements               |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XADV";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum DType {
    F32 = 1,
    U32 = 2,
}

impl DType {
    fn from_code(code: u16) -> Result<Self> {
        match code {
            1 => Ok(Self::F32),
            2 => Ok(Self::U32),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U32(ArrayD<u32>),
}

impl TensorData {
    pub fn from_f64(a: &ArrayD<f64>) -> Self {
        Self::F32(a.mapv(|v| v as f32))
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        Self::U32(ArrayD::from_shape_vec(IxDyn(&[labels.len()]), labels.iter().map(|&l| l as u32).collect())
            .expect("1-d"))
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(a) => a.shape(),
            Self::U32(a) => a.shape(),
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            Self::F32(a) => Ok(a.mapv(|v| v as f64)),
            Self::U32(_) => Err(Error::Format("expected f32 payload, found u32".into())),
        }
    }

    pub fn into_labels(self) -> Result<Vec<usize>> {
        match self {
            Self::U32(a) => Ok(a.iter().map(|&v| v as usize).collect()),
            Self::F32(_) => Err(Error::Format("expected u32 payload, found f32".into())),
        }
    }
}

pub fn write<W: Write>(mut w: W, t: &TensorData) -> Result<()> {
    let (code, shape) = match t {
        TensorData::F32(a) => (DType::F32, a.shape()),
        TensorData::U32(a) => (DType::U32, a.shape()),
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(code as u16).to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t {
        TensorData::F32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        TensorData::U32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<TensorData> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an XADV container".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported XADV version {version}")));
    }
    let dtype = DType::from_code(u16::from_le_bytes([head[6], head[7]]))?;
    let rank = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let words = buf.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
    let shape = IxDyn(&shape);
    let bad = |e: ndarray::ShapeError| Error::Format(e.to_string());
    Ok(match dtype {
        DType::F32 => TensorData::F32(
            ArrayD::from_shape_vec(shape, words.map(f32::from_le_bytes).collect()).map_err(bad)?,
        ),
        DType::U32 => TensorData::U32(
            ArrayD::from_shape_vec(shape, words.map(u32::from_le_bytes).collect()).map_err(bad)?,
        ),
    })
}

pub fn save(path: &Path, t: &TensorData) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorData> {
    read(BufReader::new(File::open(path)?))
}
