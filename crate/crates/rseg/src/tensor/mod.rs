//! Dense f32 tensors with reverse-mode automatic differentiation on a tape.
//!
//! Everything the networks need is built from the operations in [`ops`] and
//! [`loss`]: convolution, normalization, pooling, resizing, matmul and the
//! three loss heads. Training state lives in a [`ParamStore`](optim::ParamStore)
//! and is updated by [`SgdMomentum`](optim::SgdMomentum).
//!
//! The whole stack is generic over the element type so the identical code path
//! can run in `f64` for finite-difference gradient verification; production
//! training always uses `f32`.

mod tape;

pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod optim;

pub use tape::{Tape, Var};

use std::fmt;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument in {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite input in {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("parameter {name:?} already registered")]
    DuplicateParam { name: String },
    #[error("parameter {name:?} has no gradient")]
    MissingGradient { name: String },
}

/// Scalar type the tensor stack is generic over. `f32` is the production
/// type; `f64` exists for gradient verification only.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Row-major GEMM: `c = alpha * a @ b + beta * c` with `a: m x k`,
    /// `b: k x n`, `c: m x n`. Strides let callers pass transposed views.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// N-dimensional dense array, row-major. A scalar has the empty shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as NCHW, erroring out otherwise.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected 4-d NCHW tensor, got shape {:?}", other),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected 2-d tensor, got shape {:?}", other),
            }),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot view {} elements as shape {:?} ({} elements)",
                    self.data.len(),
                    shape,
                    numel
                ),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Elementwise cast between element types (used to load f32 checkpoints
    /// into f64 verification models and back).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Shared plain-value bilinear resize with the align-corners-false
/// convention; the tape op and the mask pasting path both call this.
pub(crate) fn bilinear_resize_plane<T: Element>(
    src: &[T],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    dst: &mut [T],
) {
    debug_assert_eq!(src.len(), in_h * in_w);
    debug_assert_eq!(dst.len(), out_h * out_w);
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = T::from_f64(fy - y0 as f64);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = T::from_f64(fx - x0 as f64);
            let top = src[y0 * in_w + x0] + (src[y0 * in_w + x1] - src[y0 * in_w + x0]) * wx;
            let bot = src[y1 * in_w + x0] + (src[y1 * in_w + x1] - src[y1 * in_w + x0]) * wx;
            dst[oy * out_w + ox] = top + (bot - top) * wy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::<f32>::scalar(4.0);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let src = vec![0.7f32; 5 * 3];
        let mut dst = vec![0.0f32; 11 * 6];
        bilinear_resize_plane(&src, 5, 3, 11, 6, &mut dst);
        assert!(dst.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn gemm_matches_naive() {
        let a = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0f32; 4];
        f32::gemm_strided(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // transposed A view: a^T is 3x2, use strides (1, 3)
        let mut ct = vec![0.0f32; 9];
        f32::gemm_strided(3, 2, 3, 1.0, &a, (1, 3), &a, (3, 1), 0.0, &mut ct);
        // a^T @ a = 3x3 gram matrix
        assert_eq!(ct[0], 1.0 + 16.0);
        assert_eq!(ct[4], 4.0 + 25.0);
    }
}
