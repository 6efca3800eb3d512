//! Dense row-major tensors with a small dtype lattice.
//!
//! Three dtypes are supported: `F32`, `F64`, and `Bf16`. Bf16 tensors keep an
//! f32 container whose values are all bf16 fixed points; matmuls on them run
//! the multiply on the rounded values and accumulate in f32, which is the
//! mixed-precision contract the training recipe assumes.

use crate::bf16::{bf16_round, bf16_round_slice, is_bf16};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
    /// bf16 emulated on f32 storage: every value is a fixed point of
    /// `bf16_round`.
    Bf16,
}

impl Dtype {
    /// Carrier type used for arithmetic: Bf16 computes on f32.
    pub fn carrier(self) -> Dtype {
        match self {
            Dtype::F64 => Dtype::F64,
            _ => Dtype::F32,
        }
    }
}

/// Backing storage; the variant must agree with `Dtype::carrier`.
#[derive(Clone, Debug, PartialEq)]
pub enum Buf {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buf {
    pub fn len(&self) -> usize {
        match self {
            Buf::F32(v) => v.len(),
            Buf::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Buf {
        match self {
            Buf::F32(v) => Buf::F32(vec![0.0; v.len()]),
            Buf::F64(v) => Buf::F64(vec![0.0; v.len()]),
        }
    }
}

/// Scalar abstraction over f32/f64 so numeric kernels are written once.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
}

/// Dense row-major numeric array with a dtype tag and an optional gradient
/// buffer of the same shape.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: Dtype,
    buf: Buf,
    grad: Option<Buf>,
}

impl Tensor {
    pub fn zeros(shape: &[usize], dtype: Dtype) -> Tensor {
        let n: usize = shape.iter().product();
        let buf = match dtype.carrier() {
            Dtype::F64 => Buf::F64(vec![0.0; n]),
            _ => Buf::F32(vec![0.0; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            dtype,
            buf,
            grad: None,
        }
    }

    pub fn from_f32(shape: &[usize], mut data: Vec<f32>, dtype: Dtype) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        match dtype {
            Dtype::F64 => Ok(Tensor {
                shape: shape.to_vec(),
                dtype,
                buf: Buf::F64(data.into_iter().map(|x| x as f64).collect()),
                grad: None,
            }),
            Dtype::Bf16 => {
                bf16_round_slice(&mut data);
                Ok(Tensor {
                    shape: shape.to_vec(),
                    dtype,
                    buf: Buf::F32(data),
                    grad: None,
                })
            }
            Dtype::F32 => Ok(Tensor {
                shape: shape.to_vec(),
                dtype,
                buf: Buf::F32(data),
                grad: None,
            }),
        }
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>, dtype: Dtype) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        match dtype {
            Dtype::F64 => Ok(Tensor {
                shape: shape.to_vec(),
                dtype,
                buf: Buf::F64(data),
                grad: None,
            }),
            _ => Self::from_f32(shape, data.into_iter().map(|x| x as f32).collect(), dtype),
        }
    }

    pub fn scalar(x: f64, dtype: Dtype) -> Tensor {
        Tensor::from_f64(&[], vec![x], dtype).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn buf(&self) -> &Buf {
        &self.buf
    }

    pub fn as_f32(&self) -> &[f32] {
        match &self.buf {
            Buf::F32(v) => v,
            Buf::F64(_) => panic!("tensor carrier is f64, not f32"),
        }
    }

    pub fn as_f64(&self) -> &[f64] {
        match &self.buf {
            Buf::F64(v) => v,
            Buf::F32(_) => panic!("tensor carrier is f32, not f64"),
        }
    }

    pub fn as_f32_mut(&mut self) -> &mut [f32] {
        match &mut self.buf {
            Buf::F32(v) => v,
            Buf::F64(_) => panic!("tensor carrier is f64, not f32"),
        }
    }

    /// Copy of the values widened to f64 regardless of carrier.
    pub fn to_vec_f64(&self) -> Vec<f64> {
        match &self.buf {
            Buf::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buf::F64(v) => v.clone(),
        }
    }

    pub fn get(&self, idx: usize) -> f64 {
        match &self.buf {
            Buf::F32(v) => v[idx] as f64,
            Buf::F64(v) => v[idx],
        }
    }

    pub fn set(&mut self, idx: usize, x: f64) {
        match &mut self.buf {
            Buf::F32(v) => {
                v[idx] = if self.dtype == Dtype::Bf16 {
                    bf16_round(x as f32)
                } else {
                    x as f32
                }
            }
            Buf::F64(v) => v[idx] = x,
        }
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Convert to a bf16-emulated tensor by rounding every value.
    pub fn to_bf16(&self) -> Tensor {
        let mut data: Vec<f32> = self.to_vec_f64().into_iter().map(|x| x as f32).collect();
        bf16_round_slice(&mut data);
        Tensor {
            shape: self.shape.clone(),
            dtype: Dtype::Bf16,
            buf: Buf::F32(data),
            grad: None,
        }
    }

    /// Convert to a plain carrier dtype, preserving values.
    pub fn cast(&self, dtype: Dtype) -> Tensor {
        match dtype {
            Dtype::Bf16 => self.to_bf16(),
            Dtype::F32 => Tensor {
                shape: self.shape.clone(),
                dtype,
                buf: Buf::F32(self.to_vec_f64().into_iter().map(|x| x as f32).collect()),
                grad: None,
            },
            Dtype::F64 => Tensor {
                shape: self.shape.clone(),
                dtype,
                buf: Buf::F64(self.to_vec_f64()),
                grad: None,
            },
        }
    }

    pub fn grad(&self) -> Option<&Buf> {
        self.grad.as_ref()
    }

    /// Gradient widened to f64 (empty if no gradient is attached).
    pub fn grad_f64(&self) -> Vec<f64> {
        match &self.grad {
            Some(Buf::F32(v)) => v.iter().map(|&x| x as f64).collect(),
            Some(Buf::F64(v)) => v.clone(),
            None => Vec::new(),
        }
    }

    pub fn set_grad(&mut self, grad: Option<Buf>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel(), "gradient shape mismatch");
        }
        self.grad = grad;
    }

    pub fn all_finite(&self) -> bool {
        match &self.buf {
            Buf::F32(v) => v.iter().all(|x| x.is_finite()),
            Buf::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Debug-only invariant: Bf16 tensors hold only bf16 fixed points.
    pub fn check_bf16_invariant(&self) -> bool {
        match (&self.dtype, &self.buf) {
            (Dtype::Bf16, Buf::F32(v)) => v.iter().all(|&x| is_bf16(x)),
            (Dtype::Bf16, Buf::F64(_)) => false,
            _ => true,
        }
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

pub(crate) fn matmul_kernel<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// 2-D matrix product `A[m×k] · B[k×n]`.
///
/// Accumulation happens in the carrier precision (f32 for F32/Bf16 inputs,
/// f64 for F64). If either input is bf16-emulated both operands are rounded
/// to the bf16 lattice before the multiply and the result stays f32.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = rows_cols(a.shape()).ok_or_else(|| Error::ShapeMismatch {
        context: "matmul lhs must be 2-D",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })?;
    let (kb, n) = rows_cols(b.shape()).ok_or_else(|| Error::ShapeMismatch {
        context: "matmul rhs must be 2-D",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            context: "matmul inner dimensions",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    match (&a.buf, &b.buf) {
        (Buf::F64(av), Buf::F64(bv)) => {
            let mut out = vec![0.0f64; m * n];
            matmul_kernel(av, bv, m, ka, n, &mut out);
            Tensor::from_f64(&[m, n], out, Dtype::F64)
        }
        (Buf::F32(av), Buf::F32(bv)) => {
            let bf16_mode = a.dtype == Dtype::Bf16 || b.dtype == Dtype::Bf16;
            let mut out = vec![0.0f32; m * n];
            if bf16_mode {
                let ar: Vec<f32> = av.iter().map(|&x| bf16_round(x)).collect();
                let br: Vec<f32> = bv.iter().map(|&x| bf16_round(x)).collect();
                matmul_kernel(&ar, &br, m, ka, n, &mut out);
            } else {
                matmul_kernel(av, bv, m, ka, n, &mut out);
            }
            Tensor::from_f32(&[m, n], out, Dtype::F32)
        }
        _ => Err(Error::Config(format!(
            "matmul dtype mismatch: {:?} vs {:?}",
            a.dtype, b.dtype
        ))),
    }
}

pub(crate) fn softmax_rows_kernel<T: Real>(xs: &mut [T], cols: usize) -> Result<()> {
    for row in xs.chunks_mut(cols) {
        let mut mx = T::neg_infinity();
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        if mx == T::neg_infinity() {
            return Err(Error::DegenerateSlice);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            // -inf - max stays -inf; exp maps it to exactly 0.
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(())
}

/// Numerically stable softmax along `axis` (negative axes count from the
/// back). Slices may contain -inf markers for masked entries; a slice of
/// only -inf is rejected.
pub fn softmax_stable(x: &Tensor, axis: isize) -> Result<Tensor> {
    let rank = x.shape().len() as isize;
    let ax = if axis < 0 { rank + axis } else { axis };
    if ax < 0 || ax >= rank {
        return Err(Error::Config(format!(
            "softmax axis {axis} out of range for rank {rank}"
        )));
    }
    if ax != rank - 1 {
        // Transpose-free implementation only handles the trailing axis; move
        // the requested axis last by permuting explicit loops.
        return softmax_general(x, ax as usize);
    }
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    out.grad = None;
    match &mut out.buf {
        Buf::F32(v) => softmax_rows_kernel(v, cols)?,
        Buf::F64(v) => softmax_rows_kernel(v, cols)?,
    }
    if out.dtype == Dtype::Bf16 {
        out.dtype = Dtype::F32;
    }
    Ok(out)
}

fn softmax_general(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let data = x.to_vec_f64();
    let mut out = vec![0.0f64; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * axis_len * inner + j * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..axis_len {
                mx = mx.max(data[at(j)]);
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice);
            }
            let mut sum = 0.0;
            for j in 0..axis_len {
                let e = (data[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..axis_len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::from_f64(&shape, out, x.dtype().carrier())
}

/// Gaussian init via Box-Muller, deterministic under the supplied rng.
pub fn randn_tensor(
    shape: &[usize],
    std: f64,
    dtype: Dtype,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor::from_f64(shape, data, dtype).expect("randn shape")
}

/// Exact GeLU: `x * Phi(x)` with the erf-based standard-normal CDF.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of exact GeLU: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

/// Elementwise exact GeLU.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.grad = None;
    match &mut out.buf {
        Buf::F32(v) => {
            for e in v.iter_mut() {
                *e = gelu_scalar(*e as f64) as f32;
            }
        }
        Buf::F64(v) => {
            for e in v.iter_mut() {
                *e = gelu_scalar(*e);
            }
        }
    }
    if out.dtype == Dtype::Bf16 {
        out.dtype = Dtype::F32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_f64(&[rows, cols], data.to_vec(), Dtype::F64).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = matmul(&eye, &x).unwrap();
        assert_eq!(y.to_vec_f64(), x.to_vec_f64());
    }

    #[test]
    fn matmul_hand_example() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[5.0, 6.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.to_vec_f64(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3], Dtype::F32);
        let x = Tensor::from_f32(&[3, 2], vec![1.0; 6], Dtype::F32).unwrap();
        let y = matmul(&z, &x).unwrap();
        assert!(y.to_vec_f64().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3], Dtype::F32);
        let b = Tensor::zeros(&[2, 3], Dtype::F32);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_bf16_equals_f32_on_prerounded() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 4.0 - 2.0
        };
        let a_raw: Vec<f32> = (0..12).map(|_| next()).collect();
        let b_raw: Vec<f32> = (0..20).map(|_| next()).collect();
        let a16 = Tensor::from_f32(&[3, 4], a_raw.clone(), Dtype::Bf16).unwrap();
        let b16 = Tensor::from_f32(&[4, 5], b_raw.clone(), Dtype::Bf16).unwrap();
        let pre_a: Vec<f32> = a_raw.iter().map(|&x| bf16_round(x)).collect();
        let pre_b: Vec<f32> = b_raw.iter().map(|&x| bf16_round(x)).collect();
        let af = Tensor::from_f32(&[3, 4], pre_a, Dtype::F32).unwrap();
        let bf = Tensor::from_f32(&[4, 5], pre_b, Dtype::F32).unwrap();
        let c16 = matmul(&a16, &b16).unwrap();
        let cf = matmul(&af, &bf).unwrap();
        for (x, y) in c16.as_f32().iter().zip(cf.as_f32()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let x = t2(1, 3, &[0.0, 0.0, 0.0]);
        let s = softmax_stable(&x, -1).unwrap();
        for v in s.to_vec_f64() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = t2(1, 2, &[1000.0, 1000.0]);
        let s = softmax_stable(&big, -1).unwrap();
        assert_eq!(s.to_vec_f64(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let x = t2(1, 2, &[0.0, 3.0f64.ln()]);
        let s = softmax_stable(&x, -1).unwrap();
        let v = s.to_vec_f64();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_and_degenerate() {
        let x = t2(1, 3, &[0.0, f64::NEG_INFINITY, 0.0]);
        let s = softmax_stable(&x, -1).unwrap().to_vec_f64();
        assert_eq!(s[1], 0.0);
        assert!((s[0] - 0.5).abs() < 1e-12);
        let bad = t2(1, 2, &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(
            softmax_stable(&bad, -1),
            Err(Error::DegenerateSlice)
        ));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // 1 * Phi(1) with Phi the exact normal CDF.
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu_scalar(-10.0)).abs() < 1e-6);
    }

    #[test]
    fn bf16_tensor_holds_fixed_points() {
        let t = Tensor::from_f32(&[2, 2], vec![0.1, 0.2, 0.3, 1.0], Dtype::Bf16).unwrap();
        assert!(t.check_bf16_invariant());
        // 0.10009765625 == f32 bits 0x3DCD0000, the nearest bf16 point to 0.1
        assert_eq!(t.as_f32()[0].to_bits(), 0x3DCD_0000);
    }
}
