//! Dense row-major tensors.
//!
//! Volumetric activations use the shape `[batch, channels, depth, height, width]`,
//! so the innermost (fastest) axis is `x`, matching the voxel order of
//! [`crate::volume::Volume`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Floating point element type. Training and inference run in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(&other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> Tensor<T> {
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

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("expected {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    /// Interprets the tensor as `[n, c, d, h, w]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, c, d, h, w] => Ok([n, c, d, h, w]),
            _ => Err(shape_err!(
                "expected a rank-5 [n, c, d, h, w] tensor, got {:?}",
                self.shape
            )),
        }
    }

    /// Number of voxels in one channel plane of a rank-5 tensor.
    pub fn plane_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Concatenates rank-5 tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cannot concatenate zero tensors"))?;
        let [_, c, d, h, w] = first.dims5()?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, pc, pd, ph, pw] = p.dims5()?;
            if [pc, pd, ph, pw] != [c, d, h, w] {
                return Err(shape_err!("batch concat of {:?} with {:?}", first.shape, p.shape));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[n, c, d, h, w], data)
    }

    /// Copies sample `i` of the batch into its own `[1, c, d, h, w]` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5()?;
        if i >= n {
            return Err(shape_err!("batch index {i} out of range for batch of {n}"));
        }
        let len = c * d * h * w;
        Tensor::from_vec(&[1, c, d, h, w], self.data[i * len..(i + 1) * len].to_vec())
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (false for batch-norm scale and shift).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros_like(&value);
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}
