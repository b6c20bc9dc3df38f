use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Logical element width used for IO byte accounting when none is given
/// (half-precision semantics).
pub const DEFAULT_ELEM_WIDTH: usize = 2;

/// Floating point element type the kernels run on.
///
/// Implemented for `f64` (reference path) and `f32` (production path).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    const NAME: &'static str;
    const BYTES: usize;

    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Most negative finite value; stands in for -inf in additive masks.
    fn mask_value() -> Self {
        Self::min_value()
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

/// Dense row-major tensor with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    elem_width_bytes: usize,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            elem_width_bytes: DEFAULT_ELEM_WIDTH,
        })
    }

    /// Builds a tensor from `f64` values, rounding into `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64_lossy(x)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
            elem_width_bytes: DEFAULT_ELEM_WIDTH,
        }
    }

    pub fn with_elem_width(mut self, bytes: usize) -> Self {
        assert!(bytes > 0, "element width must be positive");
        self.elem_width_bytes = bytes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn elem_width_bytes(&self) -> usize {
        self.elem_width_bytes
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Slices `[start, end)` along the last axis.
    pub fn slice_lastaxis(&self, start: usize, end: usize) -> Result<Self> {
        let last = *self.shape.last().ok_or(Error::RankMismatch {
            op: "slice_lastaxis",
            expected: 1,
            found: 0,
        })?;
        if start > end || end > last {
            return Err(Error::ShapeMismatch {
                op: "slice_lastaxis",
                axis: "last",
                expected: last,
                found: end,
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.data.len() / last.max(1) * width);
        if last > 0 {
            for row in self.data.chunks_exact(last) {
                data.extend_from_slice(&row[start..end]);
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = width;
        Ok(Self {
            shape,
            data,
            elem_width_bytes: self.elem_width_bytes,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            elem_width_bytes: self.elem_width_bytes,
        }
    }

    /// Converts element type, keeping the logical width.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
            elem_width_bytes: self.elem_width_bytes,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, elem_width_bytes: usize) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            elem_width_bytes,
        }
    }
}

pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_extent_is_empty() {
        let t = Tensor::<f32>::zeros([3, 0, 2]);
        assert!(t.is_empty());
        assert_eq!(t.shape(), &[3, 0, 2]);
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_f64([2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.get(&[1, 2, 3]), 23.0);
        assert_eq!(t.get(&[0, 1, 2]), 6.0);
    }

    #[test]
    fn slice_last_axis() {
        let t = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.slice_lastaxis(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2., 3., 5., 6.]);
        assert!(t.slice_lastaxis(2, 4).is_err());
    }
}
