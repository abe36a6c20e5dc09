//! Dense row-major tensors.
//!
//! `Tensor<f32>` carries pipeline activations; `Tensor<f64>` is used for
//! calibration statistics and high-precision oracles. Every constructor and
//! arithmetic helper rejects non-finite results, so a tensor that exists is
//! always finite.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element types a [`Tensor`] may hold.
pub trait Element:
    Float + Copy + Default + Send + Sync + Debug + Display + Sum + 'static
{
    /// QDT1 dtype code for this element when written losslessly.
    const DTYPE_CODE: u8;

    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE_CODE: u8 = 0;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE_CODE: u8 = 1;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
}

fn check_finite<E: Element>(data: &[E]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn checked_numel(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::ExtentOverflow)
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        if dims.contains(&0) || numel != data.len() {
            return Err(Error::InvalidDims {
                dims,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { dims, data })
    }

    pub fn from_vec(data: Vec<E>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let numel = checked_numel(dims)?;
        Self::new(dims.to_vec(), vec![E::zero(); numel])
    }

    pub fn full(dims: &[usize], value: E) -> Result<Self> {
        let numel = checked_numel(dims)?;
        Self::new(dims.to_vec(), vec![value; numel])
    }

    /// Builds a tensor from a flat-index generator.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> E) -> Result<Self> {
        let numel = checked_numel(dims)?;
        Self::new(dims.to_vec(), (0..numel).map(f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Extent of the last axis (1 for rank-0 tensors).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    /// Number of last-axis rows, i.e. `numel / last_dim`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[E] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.same_dims(other)?;
        let data: Vec<E> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data)?;
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Result<Self> {
        let data: Vec<E> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data)?;
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: E) -> Result<Self> {
        self.map(|v| v * c)
    }

    pub fn cast<F: Element>(&self) -> Result<Tensor<F>> {
        Tensor::new(
            self.dims.clone(),
            self.data.iter().map(|v| F::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, v| m.max(v.abs()))
    }

    /// Applies the same index permutation to the flat element order.
    pub fn permute_flat(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.numel() {
            return Err(Error::InvalidDims {
                dims: self.dims.clone(),
                len: perm.len(),
            });
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: perm.iter().map(|&i| self.data[i]).collect(),
        })
    }

    /// Internal constructor for callers that have already upheld the invariants.
    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(checked_numel(&dims).ok(), Some(data.len()));
        Self { dims, data }
    }

    /// Re-validates finiteness after in-crate mutation through `data_mut`.
    pub(crate) fn validated(self) -> Result<Self> {
        check_finite(&self.data)?;
        Ok(self)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }
}
