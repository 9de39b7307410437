//! The `EAWT` weights container: a little-endian list of f32 tensors.
//!
//! Layout: magic `EAWT`, u32 version (1), u32 tensor count; per tensor a u8
//! rank, `rank` u32 dims, then the row-major f32 data.

use super::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"EAWT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("bad magic bytes (not a weights container)")]
    BadMagic,
    #[error("unsupported weights version {0}")]
    VersionMismatch(u32),
    #[error("file ends early or sizes disagree")]
    TruncatedFile,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WeightsError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WeightsError::TruncatedFile
        } else {
            WeightsError::Io(e.to_string())
        }
    }
}

pub fn write_tensors_to(w: &mut impl Write, tensors: &[&Tensor<f32>]) -> Result<(), WeightsError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&[t.rank() as u8])?;
        for &d in t.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors_from(r: &mut impl Read) -> Result<Vec<Tensor<f32>>, WeightsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let mut quad = [0u8; 4];
    r.read_exact(&mut quad)?;
    let version = u32::from_le_bytes(quad);
    if version != VERSION {
        return Err(WeightsError::VersionMismatch(version));
    }
    r.read_exact(&mut quad)?;
    let n_tensors = u32::from_le_bytes(quad);

    let mut out = Vec::with_capacity(n_tensors as usize);
    for _ in 0..n_tensors {
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut quad)?;
            dims.push(u32::from_le_bytes(quad) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::from_vec(&dims, data).expect("count derived from dims"));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[&Tensor<f32>]) -> Result<(), WeightsError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_tensors_to(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

/// Reads a whole file as one container; trailing bytes are an error.
pub fn read_tensors(path: &Path) -> Result<Vec<Tensor<f32>>, WeightsError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let tensors = read_tensors_from(&mut r)?;
    let mut tail = [0u8; 1];
    match r.read(&mut tail)? {
        0 => Ok(tensors),
        _ => Err(WeightsError::TruncatedFile),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor<f32>> {
        vec![
            Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-20, 4.0]).unwrap(),
            Tensor::from_vec(&[4], vec![9.0, 8.0, 7.0, 6.0]).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.eawt");
        let tensors = sample();
        write_tensors(&path, &tensors.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(read_tensors(&path).unwrap(), tensors);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.eawt");
        let tensors = sample();
        write_tensors(&path, &tensors.iter().collect::<Vec<_>>()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_tensors(&path), Err(WeightsError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 3;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_tensors(&path), Err(WeightsError::VersionMismatch(3))));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_tensors(&path), Err(WeightsError::TruncatedFile)));

        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_tensors(&path), Err(WeightsError::TruncatedFile)));
    }
}
