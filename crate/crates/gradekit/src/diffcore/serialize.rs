//! Versioned binary container for named f32 tensors. Round trips are
//! bit-exact and preserve tensor order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 12] = b"GRADEKITPRM\0";
const VERSION: u32 = 1;

pub fn write_named_tensors(path: &Path, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let data = tensor.as_slice().ok_or_else(|| {
            Error::Contract("parameter tensors must be standard layout".into())
        })?;
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("{}: short header: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a gradekit parameter file",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported parameter version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("{}: truncated name: {e}", path.display())))?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("{}: non-utf8 tensor name: {e}", path.display())))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("{}: truncated payload: {e}", path.display())))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Format(format!("{}: bad tensor shape: {e}", path.display())))?;
        tensors.push((name, tensor));
    }
    Ok(tensors)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("{}: truncated field: {e}", path.display())))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let tensors = vec![
            (
                "enc.w".to_string(),
                ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -0.25, 3e-7, f32::MIN_POSITIVE, 0.0, -0.0])
                    .unwrap(),
            ),
            ("enc.b".to_string(), ArrayD::from_elem(IxDyn(&[3]), 0.125f32)),
            ("head".to_string(), ArrayD::from_elem(IxDyn(&[]), -7.0f32)),
        ];
        write_named_tensors(&path, &tensors).unwrap();
        let back = read_named_tensors(&path).unwrap();
        assert_eq!(back.len(), tensors.len());
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.iter().zip(t1.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // file bytes stable across rewrites
        let bytes = std::fs::read(&path).unwrap();
        write_named_tensors(&path, &back).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"GRADEKITVOL\0rest").unwrap();
        assert!(matches!(read_named_tensors(&path), Err(Error::Format(_))));
    }
}
