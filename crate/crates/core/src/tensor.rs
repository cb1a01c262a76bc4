//! Dense row-major tensor. Images and activations use [C, H, W] layout;
//! classifier matrices use [rows, cols].

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dimension(
                format!("{n} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Channel count for a [C, H, W] tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// (H, W) for a [C, H, W] tensor.
    pub fn hw(&self) -> (usize, usize) {
        (self.shape[self.shape.len() - 2], self.shape[self.shape.len() - 1])
    }

    /// One channel plane of a [C, H, W] tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let (h, w) = self.hw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let (h, w) = self.hw();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn fill(&mut self, value: T) {
        for v in self.data.iter_mut() {
            *v = value;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    /// self += other * s
    pub fn axpy(&mut self, s: T, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squared differences against another tensor of the same shape.
    pub fn l2_distance(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = a.to_f64c() - b.to_f64c();
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Cast every element to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    /// Concatenate along channel axis; all inputs must share H and W.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::config("concat_channels: no inputs"));
        }
        let (h, w) = parts[0].hw();
        let mut total_c = 0;
        for p in parts {
            if p.hw() != (h, w) {
                return Err(Error::dimension(
                    format!("spatial dims {h}x{w}"),
                    format!("{}x{}", p.hw().0, p.hw().1),
                ));
            }
            total_c += p.channels();
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Tensor {
            shape: vec![total_c, h, w],
            data,
        })
    }
}

/// FNV-1a checksum over the little-endian f32 byte representation.
/// Used for provenance fingerprints of parameter sets and feature payloads.
pub fn checksum_f32<T: Real>(chunks: &[&[T]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in chunks {
        for v in chunk.iter() {
            for b in v.to_f32c().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}
