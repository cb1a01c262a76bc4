//! Little-endian binary readers/writers shared by the checkpoint, ensemble
//! and feature-file containers.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;
use std::io::{Read, Write};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)
}

pub fn read_u32<R: Read>(r: &mut R, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::load(path, "truncated file (u32)"))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_f64<R: Read>(r: &mut R, path: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::load(path, "truncated file (f64)"))?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_bytes<R: Read>(r: &mut R, path: &str) -> Result<Vec<u8>> {
    let len = read_u32(r, path)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::load(path, "truncated byte payload"))?;
    Ok(buf)
}

/// Tensor record: u32 name length + name + u8 rank + u32 dims + f32 payload.
pub fn write_tensor<W: Write, T: Real>(w: &mut W, name: &str, t: &Tensor<T>) -> std::io::Result<()> {
    write_bytes(w, name.as_bytes())?;
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for v in t.data() {
        w.write_all(&v.to_f32c().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read, T: Real>(r: &mut R, path: &str) -> Result<(String, Tensor<T>)> {
    let name_bytes = read_bytes(r, path)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::load(path, "tensor name is not utf-8"))?;
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|_| Error::load(path, format!("truncated rank for tensor {name}")))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(r, path)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::load(path, format!("truncated tensor payload for {name}")))?;
        data.push(T::from_f32c(f32::from_le_bytes(buf)));
    }
    let t = Tensor::from_vec(&shape, data)
        .map_err(|e| Error::load(path, format!("bad tensor {name}: {e}")))?;
    Ok((name, t))
}

/// Byte size a tensor record occupies on disk.
pub fn tensor_record_size(name: &str, shape: &[usize]) -> usize {
    4 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}
