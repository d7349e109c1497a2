//! `.npy` array files and memory-mapped row access.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use memmap2::Mmap;
use npyz::WriterBuilder;

use crate::error::{Error, IoContext, Result};

pub fn write_npy(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::ShapeMismatch(format!("array of {} values cannot have shape {:?}", data.len(), shape)));
    }
    let file = File::create(path).at(path)?;
    let shape: Vec<u64> = shape.iter().map(|&s| s as u64).collect();
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .at(path)?;
    w.extend(data.iter().copied()).at(path)?;
    w.finish().at(path)
}

pub fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path).at(path)?;
    let npy = npyz::NpyFile::new(&bytes[..]).at(path)?;
    if npy.order() != npyz::Order::C {
        return Err(Error::Format(format!("{}: only C-order arrays are supported", path.display())));
    }
    let shape = npy.shape().iter().map(|&s| s as usize).collect();
    let data = npy.into_vec::<f64>().at(path)?;
    Ok((shape, data))
}

/// A read-only 2-D little-endian `f64` array backed by a memory map.
pub struct MappedMatrix {
    map: Mmap,
    offset: usize,
    rows: usize,
    cols: usize,
}

impl MappedMatrix {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        // SAFETY: bank files are written once and never modified while mapped.
        let map = unsafe { Mmap::map(&file) }.at(path)?;
        let npy = npyz::NpyFile::new(&map[..]).at(path)?;
        let shape = npy.shape().to_vec();
        let little_f64 = matches!(npy.dtype(), npyz::DType::Plain(t) if t.to_string() == "<f8");
        if shape.len() != 2 || !little_f64 || npy.order() != npyz::Order::C {
            return Err(Error::Format(format!("{}: expected a C-order 2-D <f8 array", path.display())));
        }
        let rest = npy.into_inner().len();
        let (rows, cols) = (shape[0] as usize, shape[1] as usize);
        if rest != rows * cols * 8 {
            return Err(Error::Format(format!("{}: truncated array payload", path.display())));
        }
        let offset = map.len() - rest;
        Ok(MappedMatrix { map, offset, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_into(&self, r: usize, out: &mut [f64]) {
        assert!(r < self.rows && out.len() == self.cols);
        let start = self.offset + r * self.cols * 8;
        for (o, chunk) in out.iter_mut().zip(self.map[start..start + self.cols * 8].chunks_exact(8)) {
            *o = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_and_mapped_reads_agree() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 1.0).collect();
        write_npy(&p, &[4, 3], &data).unwrap();
        let (shape, back) = read_npy(&p).unwrap();
        assert_eq!(shape, vec![4, 3]);
        assert_eq!(back, data);
        let m = MappedMatrix::open(&p).unwrap();
        let mut row = [0.0; 3];
        m.row_into(2, &mut row);
        assert_eq!(row, [2.0, 2.5, 3.0]);
        assert!(write_npy(&p, &[5, 3], &data).is_err());
    }
}
