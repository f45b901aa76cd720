//! Dense 2-D kernels shared by the autodiff graph and the plain forward API.
//!
//! Every tensor in the model is a row-major `Array2`. Vectors are `1 x n`
//! rows. Keeping a single set of kernels means the graph path and any
//! reference path built from these functions agree bit-for-bit.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type used throughout the model (`f32` for
/// training, `f64` for gradient verification).
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-6;

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn matmul<T: Scalar>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Array2<T> {
    a.dot(b)
}

pub fn all_finite<T: Scalar>(x: &Array2<T>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(x: &ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax over a slice, returned as a new vector.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |s, &v| s + v);
    exps.into_iter().map(|v| v / sum).collect()
}

/// Per-row statistics kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub normalized: Array2<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise layer normalization with affine scale/shift (`1 x n` each).
pub fn layer_norm<T: Scalar>(
    x: &ArrayView2<T>,
    gamma: &ArrayView2<T>,
    beta: &ArrayView2<T>,
) -> (Array2<T>, NormStats<T>) {
    let n = T::from_usize(x.ncols()).unwrap();
    let eps = T::of(LN_EPS);
    let mut normalized = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normalized.rows_mut() {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    let mut out = normalized.clone();
    for mut row in out.rows_mut() {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.row(0)).zip(beta.row(0)) {
            *v = *v * g + b;
        }
    }
    (out, NormStats { normalized, inv_std })
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: &ArrayView2<T>) -> Array2<T> {
    x.mapv(|v| {
        let v = v.to_f64_lossy();
        T::of(v * std_normal_cdf(v))
    })
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.to_f64_lossy();
    T::of(std_normal_cdf(v) + v * std_normal_pdf(v))
}

/// Soft-target cross entropy for one row of logits, with the log clamped
/// at [`LOG_CLAMP`]. Returns the loss and the softmax probabilities.
pub fn cross_entropy_row<T: Scalar>(logits: &[T], target: &[T]) -> (T, Vec<T>) {
    let probs = softmax_slice(logits);
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max + logits.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln();
    let floor = T::of(LOG_CLAMP).ln();
    let mut loss = T::zero();
    for (&z, &y) in logits.iter().zip(target) {
        if y != T::zero() {
            loss -= y * (z - lse).max(floor);
        }
    }
    (loss, probs)
}

/// Gradient of [`cross_entropy_row`] with respect to the logits.
pub fn cross_entropy_row_grad<T: Scalar>(logits: &[T], target: &[T]) -> Vec<T> {
    let probs = softmax_slice(logits);
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max + logits.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln();
    let floor = T::of(LOG_CLAMP).ln();
    let live: Vec<bool> = logits.iter().map(|&z| z - lse > floor).collect();
    let mass = target
        .iter()
        .zip(&live)
        .fold(T::zero(), |s, (&y, &l)| if l { s + y } else { s });
    probs
        .iter()
        .zip(target)
        .zip(&live)
        .map(|((&p, &y), &l)| p * mass - if l { y } else { T::zero() })
        .collect()
}

/// Sum of binary cross entropies over one row, in the log-sum-exp form
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_row<T: Scalar>(logits: &[T], target: &[T]) -> T {
    logits.iter().zip(target).fold(T::zero(), |s, (&z, &y)| {
        s + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
    })
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Arithmetic mean over rows, as a `1 x n` row.
pub fn mean_rows<T: Scalar>(x: &ArrayView2<T>) -> Array2<T> {
    let n = T::from_usize(x.nrows()).unwrap();
    let sum = x.sum_axis(Axis(0));
    sum.mapv(|v| v / n).insert_axis(Axis(0))
}

pub fn row<T: Scalar>(values: &[T]) -> Array2<T> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

pub fn cast<T: Scalar, U: Scalar>(x: &Array2<T>) -> Array2<U> {
    x.mapv(|v| U::of(v.to_f64_lossy()))
}
