//! Parameter checkpoints.
//!
//! Single binary file: magic `CSTM1`, version u32 LE, then per-tensor
//! records of (name length u32 LE, name bytes, rank u32 LE, dims u64 LE,
//! f64 LE payload) until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::NumericsError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"CSTM1";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(&str, &Tensor)]) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    loop {
        let name_len = match read_u32_opt(&mut r)? {
            Some(n) => n as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| NumericsError::Checkpoint(format!("non-utf8 tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| NumericsError::Checkpoint(format!("tensor {name:?}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a u32 or reports a clean end of file.
fn read_u32_opt<R: Read>(r: &mut R) -> Result<Option<u32>, NumericsError> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(NumericsError::Checkpoint("truncated record header".into()));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.cstm");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-9, -7.75]).unwrap();
        let b = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        save_checkpoint(&path, &[("enc.w", &a), ("dec.b", &b)]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "enc.w");
        assert_eq!(loaded[0].1.shape, vec![2, 3]);
        assert_eq!(loaded[0].1.data, a.data);
        assert_eq!(loaded[1].0, "dec.b");
        assert_eq!(loaded[1].1.data, b.data);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join(format!("ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.cstm");
        std::fs::write(&path, b"JUNK!\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NumericsError::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
