//! Versioned binary parameter checkpoints.
//!
//! Layout: 8-byte magic, u64 meta word count + meta words, u64 tensor count,
//! then per tensor a u64 rank, u64 dims, and row-major f64 data. All integers
//! and floats little-endian. Writing the same parameters twice produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn write(path: &Path, magic: &[u8; 8], meta: &[u64], tensors: &[&Tensor]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(magic)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    for m in meta {
        w.write_all(&m.to_le_bytes())?;
    }
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u64>, Vec<Tensor>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut found_magic = [0u8; 8];
    r.read_exact(&mut found_magic)?;
    if &found_magic != magic {
        return Err(Error::Data(format!(
            "checkpoint {}: magic mismatch (expected {:?}, found {:?})",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found_magic)
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta = Vec::with_capacity(meta_len);
    for _ in 0..meta_len {
        meta.push(read_u64(&mut r)?);
    }
    let tensor_count = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f64(&mut r)?);
        }
        tensors.push(
            Tensor::new(shape, data)
                .map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))?,
        );
    }
    Ok((meta, tensors))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
