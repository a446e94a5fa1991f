//! Flat binary tensors for caching descriptors and histograms.
//!
//! Layout: `u32` rank, `rank` x `u32` dimensions, then the row-major data as
//! `f32`, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::histogram::HueSatHistogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlatTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl FlatTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "dims {dims:?} imply {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Stack equal-length rows into a 2D tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("rows have different lengths".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().map(|&v| v as f32).collect(),
        )
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.dims.len() != 2 {
            return Err(Error::Dimension(format!(
                "expected a 2D tensor, got rank {}",
                self.dims.len()
            )));
        }
        let cols = self.dims[1];
        if cols == 0 {
            return Ok(vec![Vec::new(); self.dims[0]]);
        }
        Ok(self
            .data
            .chunks(cols)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "implausible tensor rank",
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b4)?;
            dims.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = dims.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("expected {} data bytes, found {}", n * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))
    }
}

impl From<&HueSatHistogram> for FlatTensor {
    fn from(h: &HueSatHistogram) -> Self {
        let (hb, sb) = h.shape();
        Self {
            dims: vec![hb, sb],
            data: h.bins().iter().map(|&v| v as f32).collect(),
        }
    }
}

impl TryFrom<&FlatTensor> for HueSatHistogram {
    type Error = Error;

    fn try_from(t: &FlatTensor) -> Result<Self> {
        if t.dims.len() != 2 {
            return Err(Error::Dimension("histogram tensors are 2D".into()));
        }
        HueSatHistogram::from_bins(
            t.dims[0],
            t.dims[1],
            t.data.iter().map(|&v| v as f64).collect(),
        )
    }
}
