//! Forward kernels shared by the graph and the stepwise inference path.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

static EXP_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of `exp` evaluations that overflowed and were clamped since process start.
pub fn exp_clamp_count() -> u64 {
    EXP_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Softplus,
    Tanh,
    Exp,
    Sigmoid,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn saturating_exp<T: Scalar>(x: T) -> T {
    let y = x.exp();
    if y.is_infinite() {
        if EXP_CLAMPS.fetch_add(1, Ordering::Relaxed) == 0 {
            log::warn!("exp overflow at input {x}; clamping to the largest finite value");
        }
        T::max_value()
    } else {
        y
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Exp => saturating_exp(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => T::one() - y * y,
            Activation::Exp => y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

fn gemm_checked<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, a_strides, b, b_strides, T::zero(), &mut c);
    c
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// `A[m×k] · B[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
    }
    let c = gemm_checked(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1));
    Tensor::new(vec![m, n], c)
}

/// `A[m×k] · B[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (n, k2) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_nt inner dims {k} vs {k2}")));
    }
    let c = gemm_checked(m, k, n, a.data(), (k as isize, 1), b.data(), (1, k as isize));
    Tensor::new(vec![m, n], c)
}

/// `A[k×m]ᵀ · B[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_tn inner dims {k} vs {k2}")));
    }
    let c = gemm_checked(m, k, n, a.data(), (1, m as isize), b.data(), (n as isize, 1));
    Tensor::new(vec![m, n], c)
}

/// Row vector times matrix: `x[k] · W[k×n]`, accumulated in index order.
pub fn vecmat<T: Scalar>(x: &[T], w: &Tensor<T>) -> Result<Vec<T>> {
    let (k, n) = dims2(w, "vecmat weight")?;
    if x.len() != k {
        return Err(Error::dim(format!("vecmat input {} vs weight rows {k}", x.len())));
    }
    let mut out = vec![T::zero(); n];
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    Ok(out)
}

pub fn outer<T: Scalar>(a: &[T], b: &[T]) -> Tensor<T> {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        data.extend(b.iter().map(|&y| x * y));
    }
    Tensor::new(vec![a.len(), b.len()], data).expect("non-empty outer operands")
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} invalid for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..len).map(|j| (src[idx(j)] - max).exp()).sum::<T>().ln();
            for j in 0..len {
                out[idx(j)] = src[idx(j)] - lse;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Reciprocal RMS of each row of the last axis.
pub(crate) fn inv_rms_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Vec<T> {
    let d = x.cols();
    let dt = T::from_usize(d).unwrap();
    (0..x.rows())
        .map(|r| {
            let ms = x.row(r).iter().map(|&v| v * v).sum::<T>() / dt;
            T::one() / (ms + eps).sqrt()
        })
        .collect()
}

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if eps < T::zero() {
        return Err(Error::contract("rmsnorm eps must be nonnegative"));
    }
    let d = x.cols();
    if weight.numel() != d {
        return Err(Error::dim(format!(
            "rmsnorm weight has {} entries, last axis is {d}",
            weight.numel()
        )));
    }
    let inv = inv_rms_rows(x, eps);
    let w = weight.data();
    let mut out = Vec::with_capacity(x.numel());
    for (r, &s) in inv.iter().enumerate() {
        out.extend(x.row(r).iter().zip(w).map(|(&v, &g)| v * s * g));
    }
    let y = Tensor::new(x.shape().to_vec(), out)?;
    if !y.is_finite() {
        return Err(Error::contract("rmsnorm produced a non-finite value (zero row with eps = 0?)"));
    }
    Ok(y)
}

/// Depthwise causal convolution over time.
///
/// `x` is `[T×c]`, `kernel` is `[c×w]` with tap `w-1` multiplying the current input,
/// `state` is `[c×(w-1)]` holding the previous `w-1` inputs, oldest first.
pub fn causal_conv1d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    state: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (steps, c) = dims2(x, "conv input")?;
    let (kc, w) = dims2(kernel, "conv kernel")?;
    if kc != c {
        return Err(Error::dim(format!("conv kernel has {kc} channels, input has {c}")));
    }
    if w < 2 {
        return Err(Error::dim("conv width must be at least 2"));
    }
    let (sc, sw) = dims2(state, "conv state")?;
    if sc != c || sw != w - 1 {
        return Err(Error::dim(format!(
            "conv state is [{sc}×{sw}], expected [{c}×{}]",
            w - 1
        )));
    }
    let mut out = vec![T::zero(); steps * c];
    let mut new_state = vec![T::zero(); c * (w - 1)];
    let xd = x.data();
    for ch in 0..c {
        let taps = kernel.row(ch);
        let mut window: Vec<T> = state.row(ch).to_vec();
        window.extend((0..steps).map(|t| xd[t * c + ch]));
        for t in 0..steps {
            let mut acc = T::zero();
            for (j, &k) in taps.iter().enumerate() {
                acc += k * window[t + j];
            }
            out[t * c + ch] = acc;
        }
        new_state[ch * (w - 1)..(ch + 1) * (w - 1)].copy_from_slice(&window[steps..]);
    }
    Ok((Tensor::new(vec![steps, c], out)?, Tensor::new(vec![c, w - 1], new_state)?))
}
