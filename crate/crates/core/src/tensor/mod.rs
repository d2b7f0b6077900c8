//! Dense row-major tensors and the forward kernels shared by the tape.

mod param;
mod scalar;
pub mod tape;

pub use param::{ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{GradStore, Tape, Var};

use crate::error::{ComboError, Result};

/// Precision a tensor pipeline is instantiated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = ComboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(ComboError::Config(format!(
                "unknown precision {other:?} (expected f32 or f64)"
            ))),
        }
    }
}

/// A dense tensor with row-major contiguous storage.
///
/// Every extent is at least 1 and `shape.iter().product() == data.len()`.
/// Most operations view the tensor as a matrix whose column count is the
/// last extent and whose row count is the product of all other extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(ComboError::InvalidTensor("empty shape".into()));
        }
        if shape.contains(&0) {
            return Err(ComboError::InvalidTensor(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ComboError::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("valid shape")
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a `rows×cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ComboError::InvalidTensor("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Last extent.
    #[inline]
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all extents except the last.
    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| T::of(x.to_f64().expect("finite")))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|x| x * c)
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(ComboError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix product of `[m×k]` and `[k×n]` tensors.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(ComboError::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(self, false, other, false, &mut out, S::zero());
        Tensor::new(vec![m, n], out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(ComboError::InvalidTensor(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// `out = op(a) · op(b) + beta · out` for 2-D operands, where `op` optionally
/// transposes. Shapes are the stored (untransposed) shapes.
pub(crate) fn gemm<S: Scalar>(
    a: &Tensor<S>,
    trans_a: bool,
    b: &Tensor<S>,
    trans_b: bool,
    out: &mut [S],
    beta: S,
) {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "gemm inner extent");
    assert_eq!(out.len(), m * n, "gemm output size");
    // SAFETY: extents and strides above describe exactly the row-major
    // buffers of `a`, `b` and `out`, which are distinct allocations.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax over the last axis with max-subtraction.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Per-row statistics kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats<S> {
    pub normalized: Vec<S>,
    pub rstd: Vec<S>,
}

/// Last-axis layer normalization with biased variance.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_with_stats<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, NormStats<S>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(ComboError::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let inv_d = S::one() / S::of(d as f64);
    let mut normalized = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(x.rows());
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks_exact(d) {
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * r;
            normalized.push(xh);
            out.push(xh * gamma.data[j] + beta.data[j]);
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        NormStats { normalized, rstd },
    ))
}

/// GELU with the exact error-function form `x·Φ(x)`.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu_scalar`]: `Φ(x) + x·φ(x)`.
#[inline]
pub(crate) fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let cdf = half * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * S::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
