//! Rank-generic dense tensors and the kernels axial layers are assembled from.
//!
//! A [`Tensor`] always carries a trailing channel axis. The `K` leading axes
//! are spatial; axis permutations act on those only. Every kernel here is a
//! pure function of its inputs, and the ones that work on the trailing axes
//! treat all other spatial axes as batch.

mod attention;
mod conv;
mod gemm;
pub mod io;
mod linear;
mod norm;
mod perm;
mod pool;

pub use attention::{
    attention_mults_per_sequence, flattened_attention_mults, self_attention_lastaxis,
    self_attention_lastaxis_backward, self_attention_lastaxis_counted, AttentionGrads,
    AttentionCount, AttentionSpec, AttentionWeights,
};
pub use conv::{conv_lastaxes, conv_lastaxes_backward, ConvGrads, ConvSpec, Padding};
pub use linear::{linear_lastaxis, linear_lastaxis_backward, LinearGrads, LinearSpec};
pub use norm::{
    gelu, layer_norm_channels, layer_norm_channels_backward, relu, sigmoid, Activation,
    LayerNormGrads, LAYER_NORM_EPS,
};
pub use perm::{permute, AxisPerm};
pub use pool::{
    adaptive_pool, adaptive_pool_backward, bin_bounds, resize_repeat, resize_repeat_backward,
    PoolMode,
};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with `spatial_rank` spatial axes followed
/// by one channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    spatial_rank: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a full shape (spatial axes then channel) and data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("tensor shape must include a channel axis"));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "axis lengths must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        let spatial_rank = shape.len() - 1;
        Ok(Self {
            shape,
            spatial_rank,
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            data.push(f(&idx));
            increment(&mut idx, shape);
        }
        Self::new(shape.to_vec(), data)
    }

    /// Uniform samples in `[-1, 1)`.
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self::new(shape.to_vec(), data)
    }

    /// A single value with no spatial axes.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            spatial_rank: 0,
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.shape[..self.spatial_rank]
    }

    pub fn spatial_rank(&self) -> usize {
        self.spatial_rank
    }

    pub fn channels(&self) -> usize {
        self.shape[self.spatial_rank]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides of the full shape.
    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let offset = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[offset]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: shape.to_vec(),
            });
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "expected a single-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            spatial_rank: self.spatial_rank,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            spatial_rank: self.spatial_rank,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Element-wise maximum; on ties the value of `self` is kept.
    pub fn maximum(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| if b > a { b } else { a })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let spatial_rank = shape.len() - 1;
        Self {
            shape,
            spatial_rank,
            data,
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Advances a row-major multi-index; wraps to all zeros after the last index.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0, 1], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn channel_axis_is_last() {
        let t = Tensor::zeros(&[4, 5, 3]).unwrap();
        assert_eq!(t.spatial_rank(), 2);
        assert_eq!(t.spatial_shape(), &[4, 5]);
        assert_eq!(t.channels(), 3);
        assert_eq!(t.strides(), vec![15, 3, 1]);
    }

    #[test]
    fn from_fn_walks_row_major() {
        let t = Tensor::from_fn(&[2, 3, 1], |i| (i[0] * 10 + i[1]) as f64).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.get(&[1, 2, 0]), 12.0);
    }

    #[test]
    fn maximum_keeps_left_on_ties() {
        let a = Tensor::new(vec![2], vec![1.0, -0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let m = a.maximum(&b).unwrap();
        assert!(m.data()[1].is_sign_negative());
    }
}
