//! Minimal CPU neural-network engine: tensors are `ndarray` arrays, big
//! matrix products go through `matrixmultiply`, and every layer implements
//! an explicit forward/backward pair.
//!
//! The engine is generic over [`Scalar`] so the same layer code runs in
//! f32 for training and in f64 for finite-difference gradient checks.

mod adam;
mod attention;
mod blocks;
mod conv;
pub mod gradcheck;
mod init;
mod layers;
mod loss;
mod seq;

pub use adam::Adam;
pub use attention::SelfAttention2d;
pub use blocks::{InceptionBlock, ResidualBlock};
pub use conv::{col2im, conv_output_side, im2col, Conv2d, ConvTranspose2d};
pub use init::{normal_fill, Init};
pub use layers::{
    AvgPool2d, BatchNorm2d, Dropout, Flatten, GlobalAvgPool, GlobalMaxPool, LeakyRelu, Linear,
    MaxPool2d, Relu, Sigmoid,
};
pub use loss::{cross_entropy_from_logits, cross_entropy_smoothed, log_softmax_rows, softmax_rows};
pub use seq::Sequential;

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, NdFloat};

/// Floating-point element type the engine runs on.
///
/// Only `f32` and `f64` implement it; the associated `gemm` dispatches to
/// the matching `matrixmultiply` kernel.
pub trait Scalar: NdFloat {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// `c = alpha * a @ b + beta * c` for arbitrary-stride 2-D views.
pub fn gemm_into<T: Scalar>(
    alpha: T,
    a: &ArrayView2<'_, T>,
    b: &ArrayView2<'_, T>,
    beta: T,
    c: &mut ArrayViewMut2<'_, T>,
) {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "gemm inner dimensions differ: {ka} vs {kb}");
    assert_eq!((m, n), c.dim(), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            ka,
            n,
            alpha,
            a.as_ptr(),
            a.strides()[0],
            a.strides()[1],
            b.as_ptr(),
            b.strides()[0],
            b.strides()[1],
            beta,
            c.as_mut_ptr(),
            c.strides()[0],
            c.strides()[1],
        );
    }
}

/// `a @ b` into a freshly allocated array.
pub fn matmul<T: Scalar>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>) -> Array2<T> {
    let mut c = Array2::zeros((a.dim().0, b.dim().1));
    gemm_into(T::one(), a, b, T::zero(), &mut c.view_mut());
    c
}

/// Whether a forward pass is part of training (dropout active, batch-norm
/// uses batch statistics) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named tensor with its gradient accumulator.
///
/// Non-trainable entries (batch-norm running statistics) are carried so
/// checkpoints capture them, but optimizers skip them.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<T>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// One differentiable network stage operating on NCHW batches.
///
/// `forward` caches whatever `backward` needs; `backward` returns the
/// gradient with respect to the layer input and, when `accumulate` is set,
/// adds parameter gradients into each [`Param::grad`]. Passing
/// `accumulate = false` is the cheap path for frozen networks that only
/// need input gradients.
pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T>;
    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T>;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Per-image output shape `(C, H, W)` for a given input shape.
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3];
    /// Drop cached activations (after an optimizer step or between phases).
    fn clear_cache(&mut self) {}
}

/// Number of trainable elements across a parameter list.
pub fn count_trainable<T: Scalar>(params: &[&Param<T>]) -> usize {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.len())
        .sum()
}
