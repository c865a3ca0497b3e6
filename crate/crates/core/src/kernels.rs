//! Dense numeric primitives shared by every other module.
//!
//! Everything here is a pure function over plain row-major buffers. Reductions
//! run in a fixed loop order so results are bit-reproducible; nothing in this
//! module parallelizes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Real scalar the model can be instantiated over (`f32` for everything
/// desk-scale, `f64` for gradient checks).
pub trait Scalar: Float + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static {
    const PRECISION: Precision;

    /// Lossy conversion from an `f64` literal or intermediate.
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Exact-erf GELU.
    fn gelu(self) -> Self;
    /// Derivative of [`Scalar::gelu`].
    fn gelu_grad(self) -> Self;
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gelu(self) -> Self {
        gelu_f64(self as f64) as f32
    }
    fn gelu_grad(self) -> Self {
        gelu_grad_f64(self as f64) as f32
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gelu(self) -> Self {
        gelu_f64(self)
    }
    fn gelu_grad(self) -> Self {
        gelu_grad_f64(self)
    }
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Leading extent (rows of a matrix).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing extents.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![m, n], mm(a.data(), b.data(), m, k, n))
}

/// `a (m×k) · b (k×n)`. Each output element accumulates over `k` in
/// ascending order starting from zero.
pub fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a (k×m)`, `b (k×n)`, accumulated into `out (m×n)`.
pub fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a · bᵀ` for `a (m×k)`, `b (n×k)`.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(x)`, stable.
pub fn logsumexp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Backward of softmax given its output `p` and upstream `dp`.
pub(crate) fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &gi)| pi * (gi - inner)).collect()
}

pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() {
        return Err(Error::shape(format!(
            "rmsnorm input has width {}, gain {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("rmsnorm input"));
    }
    let mut out = vec![T::zero(); x.len()];
    rmsnorm_row(x, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out`, returns `1/rms`.
pub(crate) fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss += v * v;
    }
    let inv = T::one() / (ss / T::lit(x.len() as f64) + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * (v * inv);
    }
    inv
}

/// Row-wise RMSNorm over a `rows × width` buffer. Returns outputs and the
/// per-row inverse RMS.
pub(crate) fn rmsnorm_rows<T: Scalar>(x: &[T], gain: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let width = gain.len();
    let rows = x.len() / width;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let span = r * width..(r + 1) * width;
        inv.push(rmsnorm_row(&x[span.clone()], gain, eps, &mut out[span]));
    }
    (out, inv)
}

/// Accumulates `dx` and `dgain` for one row of `y = gain ⊙ x · inv`.
pub(crate) fn rmsnorm_backward_row<T: Scalar>(x: &[T], gain: &[T], inv: T, dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let n = T::lit(x.len() as f64);
    let mut proj = T::zero();
    for ((&xi, &gi), &dyi) in x.iter().zip(gain).zip(dy) {
        proj += gi * dyi * xi;
    }
    let coef = inv * inv * inv * proj / n;
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        dx[i] += gain[i] * dy[i] * inv - coef * x[i];
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x.gelu()
}

/// Number of leading dimensions per head that get rotated.
pub fn rotary_span(d_head: usize, fraction: f64) -> Result<usize> {
    let raw = fraction * d_head as f64;
    let span = raw.round();
    if !(fraction > 0.0) || (raw - span).abs() > 1e-9 || span < 2.0 || !(span as usize).is_multiple_of(2) {
        return Err(Error::config(
            "rotary_fraction",
            format!("rotary_fraction * d_head = {raw} is not a positive even integer"),
        ));
    }
    Ok(span as usize)
}

/// Rotates the first `span` dims of one head in place (NeoX half-split
/// pairing: dim `i` pairs with `i + span/2`). `inverse` applies the transpose.
pub(crate) fn rotate_head<T: Scalar>(x: &mut [T], position: usize, span: usize, inverse: bool) {
    let half = span / 2;
    for i in 0..half {
        let inv_freq = ROPE_BASE.powf(-2.0 * i as f64 / span as f64);
        let angle = position as f64 * inv_freq;
        let (c, mut s) = (T::lit(angle.cos()), T::lit(angle.sin()));
        if inverse {
            s = -s;
        }
        let (a, b) = (x[i], x[i + half]);
        x[i] = a * c - b * s;
        x[i + half] = b * c + a * s;
    }
}

/// Applies rotary position embedding to a `heads × d_head` tensor.
pub fn apply_rotary<T: Scalar>(q_or_k: &Tensor<T>, position: usize, rotary_fraction: f64) -> Result<Tensor<T>> {
    let &[heads, d_head] = q_or_k.shape() else {
        return Err(Error::shape(format!(
            "apply_rotary expects heads × d_head, got {:?}",
            q_or_k.shape()
        )));
    };
    let span = rotary_span(d_head, rotary_fraction)?;
    let mut out = q_or_k.clone();
    for h in 0..heads {
        rotate_head(&mut out.data_mut()[h * d_head..(h + 1) * d_head], position, span, false);
    }
    Ok(out)
}
