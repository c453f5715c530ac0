//! Dense tensors, NPY file IO, and the bilinear operations used by the
//! projection pipeline.
//!
//! [`Tensor`] is a minimal shape-plus-buffer carrier: row-major, 32- or
//! 64-bit floats, immutable once built. It exists to move data between
//! files and the fusion stages, not to be an array library; there is no
//! broadcasting and no integer dtype support. All arithmetic on tensors
//! accumulates in 64-bit floats regardless of storage dtype.

mod bilinear;
mod npy;

pub use bilinear::{bilinear_sample, bilinear_upsample};
pub use npy::{read_npy, tensor_from_npy_bytes, tensor_to_npy_bytes, write_npy};

use crate::error::{Error, Result};

/// Element storage type of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn item_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense n-dimensional float array, row-major (C order).
///
/// Invariants: every extent is at least 1 and the element count equals the
/// product of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

fn checked_element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Argument("tensor shape must not be empty".into()));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::Argument("tensor extents must be >= 1".into()));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Argument("tensor shape overflows".into()))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = checked_element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Argument(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Storage::F32(data),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Argument(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Storage::F64(data),
        })
    }

    pub fn zeros_f64(shape: Vec<usize>) -> Result<Self> {
        let n = checked_element_count(&shape)?;
        Ok(Self {
            shape,
            data: Storage::F64(vec![0.0; n]),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat element as f64 (widening is exact for f32 storage).
    pub fn flat(&self, i: usize) -> f64 {
        match &self.data {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    /// Row-major offset of a multi-index. Panics on rank or bounds mismatch.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0usize;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} ({ext})");
            off = off * ext + ix;
        }
        off
    }

    /// Element at a multi-index, as f64.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.flat(self.offset(index))
    }

    /// Borrow the f64 storage, if that is the dtype.
    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    /// Borrow the f32 storage, if that is the dtype.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }

    /// Copy out as f64 regardless of storage dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    /// Bit-exact equality (same dtype, shape, and element bits).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Dense image-feature plane, shape `[width, height, channels]`, f64.
///
/// The first axis is the pixel x (u) coordinate and the second the pixel y
/// (v) coordinate, matching how projected pixel coordinates index it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Argument("feature map extents must be >= 1".into()));
        }
        let n = width
            .checked_mul(height)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| Error::Argument("feature map shape overflows".into()))?;
        if n != data.len() {
            return Err(Error::Argument(format!(
                "feature map {}x{}x{} wants {} elements, got {}",
                width,
                height,
                channels,
                n,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    /// Reinterpret a rank-3 tensor of shape `[W, H, C]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Argument(format!(
                "feature map tensor must be rank 3, got shape {:?}",
                t.shape()
            )));
        }
        Self::new(t.shape()[0], t.shape()[1], t.shape()[2], t.to_f64_vec())
    }

    /// Export as an f32 tensor (the on-disk interchange dtype).
    pub fn to_tensor_f32(&self) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&x| x as f32).collect();
        Tensor::from_f32(vec![self.width, self.height, self.channels], data)
            .expect("feature map shape is valid by construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize, c: usize) -> f64 {
        debug_assert!(u < self.width && v < self.height && c < self.channels);
        self.data[(u * self.height + v) * self.channels + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}
