//! Little-endian `JGRD` container for label, probability, feature and
//! affinity arrays.
//!
//! Layout: magic `JGRD`, version `u8 = 1`, dtype `u8` (0 = u8, 1 = f32,
//! 2 = f64), ndim `u8`, `ndim` x `u32` dimensions, then the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LabelMap, ProbMap};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"JGRD";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::U8),
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl GridData {
    pub fn dtype(&self) -> DType {
        match self {
            GridData::U8(_) => DType::U8,
            GridData::F32(_) => DType::F32,
            GridData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridData::U8(v) => v.len(),
            GridData::F32(v) => v.len(),
            GridData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: Vec<usize>,
    pub data: GridData,
}

impl Grid {
    pub fn new(dims: Vec<usize>, data: GridData) -> Result<Self> {
        let grid = Grid { dims, data };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("unsupported ndim {}", self.dims.len())));
        }
        if self.dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Degenerate(format!("grid dimensions {:?}", self.dims)));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "dims {:?} need {expected} elements, payload has {}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let dtype = self.data.dtype();
        let mut out =
            Vec::with_capacity(7 + 4 * self.dims.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            GridData::U8(v) => out.extend_from_slice(v),
            GridData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            GridData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let mut head = [0u8; 3];
        read_exact(&mut cur, &mut head, "header")?;
        if head[0] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", head[0])));
        }
        let dtype = DType::from_code(head[1])?;
        let ndim = head[2] as usize;
        if ndim == 0 {
            return Err(Error::Format("ndim is zero".into()));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            read_exact(&mut cur, &mut b, "dimensions")?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let need = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if cur.len() < need {
            return Err(Error::Format(format!(
                "truncated payload: need {need} bytes, have {}",
                cur.len()
            )));
        }
        if cur.len() > need {
            return Err(Error::Format(format!("{} trailing bytes", cur.len() - need)));
        }
        let data = match dtype {
            DType::U8 => GridData::U8(cur.to_vec()),
            DType::F32 => GridData::F32(
                cur.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => GridData::F64(
                cur.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Grid::new(dims, data)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated {what}")))
}

pub fn write_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let bytes = grid.encode()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    Grid::decode(&fs::read(path)?)
}

/// Float element types that have a `JGRD` dtype code.
pub trait GridElement: Scalar {
    const DTYPE: DType;
    fn wrap(v: Vec<Self>) -> GridData;
    fn unwrap(d: GridData) -> Result<Vec<Self>>;
}

impl GridElement for f32 {
    const DTYPE: DType = DType::F32;
    fn wrap(v: Vec<Self>) -> GridData {
        GridData::F32(v)
    }
    fn unwrap(d: GridData) -> Result<Vec<Self>> {
        match d {
            GridData::F32(v) => Ok(v),
            other => Err(Error::Format(format!("expected f32, found {:?}", other.dtype()))),
        }
    }
}

impl GridElement for f64 {
    const DTYPE: DType = DType::F64;
    fn wrap(v: Vec<Self>) -> GridData {
        GridData::F64(v)
    }
    fn unwrap(d: GridData) -> Result<Vec<Self>> {
        match d {
            GridData::F64(v) => Ok(v),
            other => Err(Error::Format(format!("expected f64, found {:?}", other.dtype()))),
        }
    }
}

fn expect_ndim(grid: &Grid, ndim: usize) -> Result<()> {
    if grid.dims.len() != ndim {
        return Err(Error::Format(format!(
            "expected {ndim} dimensions, found {}",
            grid.dims.len()
        )));
    }
    Ok(())
}

impl From<&LabelMap> for Grid {
    fn from(m: &LabelMap) -> Self {
        Grid {
            dims: vec![m.height(), m.width()],
            data: GridData::U8(m.data().to_vec()),
        }
    }
}

impl TryFrom<Grid> for LabelMap {
    type Error = Error;
    fn try_from(g: Grid) -> Result<Self> {
        expect_ndim(&g, 2)?;
        match g.data {
            GridData::U8(v) => LabelMap::new(g.dims[0], g.dims[1], v),
            other => Err(Error::Format(format!("labels must be u8, found {:?}", other.dtype()))),
        }
    }
}

impl<T: GridElement> From<&ProbMap<T>> for Grid {
    fn from(m: &ProbMap<T>) -> Self {
        Grid {
            dims: vec![m.height(), m.width(), m.classes()],
            data: T::wrap(m.data().to_vec()),
        }
    }
}

impl<T: GridElement> TryFrom<Grid> for ProbMap<T> {
    type Error = Error;
    fn try_from(g: Grid) -> Result<Self> {
        expect_ndim(&g, 3)?;
        let (h, w, c) = (g.dims[0], g.dims[1], g.dims[2]);
        ProbMap::new(h, w, c, T::unwrap(g.data)?)
    }
}

impl<T: GridElement> From<&FeatureMap<T>> for Grid {
    fn from(m: &FeatureMap<T>) -> Self {
        Grid {
            dims: vec![m.height(), m.width(), m.channels()],
            data: T::wrap(m.data().to_vec()),
        }
    }
}

impl<T: GridElement> TryFrom<Grid> for FeatureMap<T> {
    type Error = Error;
    fn try_from(g: Grid) -> Result<Self> {
        expect_ndim(&g, 3)?;
        let (h, w, c) = (g.dims[0], g.dims[1], g.dims[2]);
        FeatureMap::new(h, w, c, T::unwrap(g.data)?)
    }
}
