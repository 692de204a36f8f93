//! Dense row-major tensors over `f32` or `f64`.
//!
//! Image batches use the layout `[batch, height, width, channels]` with the
//! channel index fastest-moving. Tensors are plain values: once built they are
//! only read, and every operation returns a fresh tensor. The element type
//! defaults to `f32`; the same code instantiates over `f64` for
//! high-precision gradient verification.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element types tensors can hold: `f32` (default) and `f64`.
///
/// The trait carries the few scalar functions the kernels need plus a matrix
/// multiply that dispatches to the BLAS-style `sgemm`/`dgemm` routines.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    /// `c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c[m,n]` with strides in
    /// elements.
    ///
    /// # Safety
    /// The pointers must be valid for the strided index ranges implied by
    /// `(m, k, n)` and the strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if other > self {
                    other
                } else {
                    self
                }
            }

            #[inline]
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `c[m,n] = a @ b (+ c if accumulate)` for contiguous row-major slices.
///
/// `trans_a` / `trans_b` treat the corresponding slice as the transpose of a
/// row-major matrix, so `a` has physical shape `[k, m]` when `trans_a` is set
/// (and likewise `[n, k]` for `b`). No data is copied either way.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::ZERO);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense row-major tensor of rank 1..=4.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a flat row-major buffer, checking that the shape
    /// accounts for every element.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::InvalidConfig(format!(
                "tensor rank must be 1..=4, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidConfig(format!(
                "shape {:?} implies {} elements but buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![T::ZERO; numel]).expect("zeros: consistent by construction")
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("filled: consistent by construction")
    }

    /// Rank-1 tensor holding a single value; the shape used for scalar losses.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor::from_vec(shape, data).expect("from_fn: consistent by construction")
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index of `[b, h, w, c]` in a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    /// Flat index of `[h, w, c]` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, h: usize, w: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (h * self.shape[1] + w) * self.shape[2] + c
    }

    #[inline]
    pub fn at4(&self, b: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.idx4(b, h, w, c)]
    }

    #[inline]
    pub fn at3(&self, h: usize, w: usize, c: usize) -> T {
        self.data[self.idx3(h, w, c)]
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::shapes("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op; shapes must match exactly.
    pub fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shapes(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |element|, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Converts the element type, rounding through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Clamps every element into `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}
