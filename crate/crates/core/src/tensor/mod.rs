//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: a shape plus a reference-counted flat
//! buffer. Cloning is cheap, which lets the autodiff tape hold model
//! parameters without copying them. Forward operations live in [`ops`], their
//! vector-Jacobian products in [`vjp`].

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod gemm;
pub mod ops;
pub mod vjp;

pub use ops::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::InvalidArgument(format!(
                "unknown dtype {other:?} (expected f32 or f64)"
            ))),
        }
    }
}

/// Floating-point element types a [`Tensor`] can hold.
pub trait Element:
    Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` on strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    ) {
        gemm::checked(
            m,
            k,
            n,
            alpha,
            a,
            b,
            beta,
            c,
            |m, k, n, alpha, a, b, beta, c| {
                // SAFETY: `gemm::checked` verified every strided index is in bounds.
                unsafe {
                    matrixmultiply::sgemm(
                        m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, c.2,
                    )
                }
            },
        )
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    ) {
        gemm::checked(
            m,
            k,
            n,
            alpha,
            a,
            b,
            beta,
            c,
            |m, k, n, alpha, a, b, beta, c| {
                // SAFETY: `gemm::checked` verified every strided index is in bounds.
                unsafe {
                    matrixmultiply::dgemm(
                        m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, c.2,
                    )
                }
            },
        )
    }
}

#[derive(Clone)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} elements but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    /// Row-major strides of the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> Result<F> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::invalid(
                "get",
                format!("index {index:?} out of bounds for shape {:?}", self.shape),
            ));
        }
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        Ok(self.data[offset])
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| G::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<F> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(F::zero(), F::max),
        )
    }

    pub(crate) fn check_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, &self.shape, expected));
        }
        Ok(())
    }
}

impl<F: Element> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", F::DTYPE, self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
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
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new([0, 3], vec![]).is_ok());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(2.5f64);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
    }

    #[test]
    fn get_uses_row_major_order() {
        let t = Tensor::<f32>::from_fn([2, 3], |i| i as f32);
        assert_eq!(t.get(&[1, 2]).unwrap(), 5.0);
        assert_eq!(t.get(&[0, 1]).unwrap(), 1.0);
        assert!(t.get(&[2, 0]).is_err());
    }

    #[test]
    fn cast_round_trips_representable_values() {
        let t = Tensor::<f32>::from_fn([4], |i| i as f32 * 0.5);
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }

    #[test]
    fn dtype_parses() {
        assert_eq!("f64".parse::<DType>().unwrap(), DType::F64);
        assert!("f16".parse::<DType>().is_err());
    }
}
