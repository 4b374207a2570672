//! Dense row-major arrays.
//!
//! Activations use the `(batch, channels, depth, height, width)` layout.
//! Everything here is plain data; differentiation lives in [`crate::autodiff`].

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Send + Sync + 'static
{
    const NAME: &'static str;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} elements but {} were supplied",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// The shape as a 5-D activation layout, or a diagnostic naming the operation.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice()).map_err(|_| {
            Error::shape(
                op,
                format!("expected a 5-D (N,C,D,H,W) tensor, got shape {:?}", self.shape),
            )
        })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Elementwise `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Channel slab `[c0, c1)` of a 5-D tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5("slice_channels")?;
        if c0 >= c1 || c1 > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channel range {c0}..{c1} outside 0..{c}"),
            ));
        }
        let vol = d * h * w;
        let mut data = Vec::with_capacity(n * (c1 - c0) * vol);
        for b in 0..n {
            let base = b * c * vol;
            data.extend_from_slice(&self.data[base + c0 * vol..base + c1 * vol]);
        }
        Ok(Self {
            shape: vec![n, c1 - c0, d, h, w],
            data,
        })
    }
}

/// Row-major flat index of `(d, h, w)` in a `[D, H, W]` grid.
#[inline]
pub fn flat3(dims: [usize; 3], d: usize, h: usize, w: usize) -> usize {
    (d * dims[1] + h) * dims[2] + w
}
