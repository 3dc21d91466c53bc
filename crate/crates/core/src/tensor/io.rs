//! `CBT1` binary tensor files: magic bytes `CBT1`, little-endian u32 rank,
//! `rank` little-endian u32 dimensions, then the values as little-endian
//! 64-bit floats in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CBT1";
const MAX_RANK: u32 = 8;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.to_vec() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected \"CBT1\"",
            path.display(),
            magic
        )));
    }
    let rank = read_u32(&mut r, path)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!(
            "{}: rank {rank} exceeds supported maximum {MAX_RANK}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = read_u32(&mut r, path)?;
        if d == 0 {
            return Err(Error::Format(format!(
                "{}: zero-sized dimension",
                path.display()
            )));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        read_exact(&mut r, &mut buf, path)?;
        data.push(f64::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        )));
    }
    Tensor::from_vec(shape, data)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated file", path.display()))
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cbt");
        let t = Tensor::from_vec(
            vec![2, 3],
            vec![1.5, -0.25, f64::MIN_POSITIVE, 1e300, 0.1, -7.0],
        )
        .unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        let (a, b) = (t.to_vec(), back.to_vec());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn scalar_rank0_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cbt");
        write_tensor(&path, &Tensor::scalar(0.693)).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.scalar_value().unwrap(), 0.693);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cbt");
        std::fs::write(&path, b"CBT1\x02\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn byte_layout_matches_external_exporter() {
        // A 1x2 tensor [1.0, 2.0] written by hand following the layout.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.cbt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CBT1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        bytes.extend_from_slice(&2.0f64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let t = read_tensor(&path).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0]);
    }
}
