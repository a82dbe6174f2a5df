//! Dense rank-4 tensors in row-major (N, C, H, W) layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// Floating point element type. The engine runs in `f32` by default and in
/// `f64` when finite-difference checks need the extra precision.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(input(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); numel(&shape)] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor { shape, data: vec![v; numel(&shape)] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A length-`n` vector stored as shape `[n, 1, 1, 1]`.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor { shape: [values.len(), 1, 1, 1], data: values }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(input(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::c(v.f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
    }

    /// `self += other * s`, elementwise.
    pub fn axpy(&mut self, s: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(input(format!("axpy shape {:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Copy of the sub-block `[start, start+len)` along axis `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        if dim > 3 || len == 0 || start + len > self.shape[dim] {
            return Err(input(format!(
                "narrow dim {} range {}..{} out of shape {:?}",
                dim,
                start,
                start + len,
                self.shape
            )));
        }
        let mut shape = self.shape;
        shape[dim] = len;
        Ok(Tensor::from_fn(shape, |mut i| {
            i[dim] += start;
            self.at(i)
        }))
    }

    /// Writes `src` into the sub-block starting at `start` along `dim`,
    /// accumulating (`+=`) into the existing values.
    pub(crate) fn accumulate_block(&mut self, dim: usize, start: usize, src: &Tensor<T>) {
        let s = src.shape;
        for n in 0..s[0] {
            for c in 0..s[1] {
                for h in 0..s[2] {
                    for w in 0..s[3] {
                        let mut i = [n, c, h, w];
                        let v = src.at(i);
                        i[dim] += start;
                        let o = self.offset(i);
                        self.data[o] += v;
                    }
                }
            }
        }
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// `max |a - b| / max |b|`, the error measure used by every equivalence check.
pub fn max_rel_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error on different shapes");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x.f64() - y.f64()).abs()));
    let scale = b.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
